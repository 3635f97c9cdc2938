"""Command-line surface.

    cpdistill teach   --config c.json --seed 7 --out runs/teach [--stage K]
    cpdistill distill --config c.json --seed 7 --out runs/r0 [--strategy NAME] [--resume]
    cpdistill eval    --config c.json --seed 7 --out runs/r0 --stage K
    cpdistill select  --input trajs.jsonl --m 5 [--strategy dpp] [--seed N] [--out DIR]
    cpdistill report  --out runs/r0

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ProtocolConfig, load_config
from .continual import ProtocolRunner, rollout_success_batch, run_protocol, write_audits
from .metrics import MetricsMatrix
from .model import StudentModel
from .replay import select_replay
from .report import load_contexts, render_report, summary_table
from .teachers import TeacherPolicy, collect, read_trajectories, write_trajectories

__all__ = ["main"]


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="cpdistill", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", type=Path, required=config_required,
                       help="protocol config JSON (see cpdistill.config)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, help="output directory")

    teach = sub.add_parser("teach", help="collect teacher trajectories to files")
    common(teach)
    teach.add_argument("--stage", type=int, help="only this stage's tasks")

    distill = sub.add_parser("distill", help="run the staged distillation protocol")
    common(distill)
    distill.add_argument("--strategy", help="override the config strategy")
    distill.add_argument("--resume", action="store_true",
                         help="continue from the newest stage checkpoint in --out")

    evalp = sub.add_parser("eval", help="score a stage checkpoint on its tasks")
    common(evalp)
    evalp.add_argument("--stage", type=int, required=True)

    select = sub.add_parser("select", help="replay selection over a trajectory file")
    select.add_argument("--input", type=Path, required=True, help="trajectory JSONL")
    select.add_argument("--m", type=int, required=True, help="trajectories to keep")
    select.add_argument("--strategy", default="dpp", help="dpp | ffs | random")
    select.add_argument("--seed", type=int, default=0)
    select.add_argument("--out", type=Path)
    select.add_argument("--slice-len", type=int, default=20)

    report = sub.add_parser("report", help="render the report for a finished run")
    report.add_argument("--out", type=Path, required=True, help="run directory")
    return parser


def _load(args) -> ProtocolConfig:
    return load_config(args.config)


def _cmd_teach(args) -> int:
    config = _load(args)
    runner = ProtocolRunner(config, args.seed)
    out = args.out or Path("teach")
    stages = runner.stream
    if args.stage is not None:
        stages = [stages[args.stage - 1]]
    written = []
    for stage_specs in stages:
        for i, spec in enumerate(stage_specs):
            trajs = collect(
                spec,
                TeacherPolicy(spec),
                config.episodes_per_task,
                base_seed=args.seed * 100003 + i,
                workers=config.workers,
                noise_std=config.teacher_noise,
            )
            path = out / f"{spec.task_id}.jsonl"
            write_trajectories(path, trajs)
            written.append(path)
    for path in written:
        print(path)
    return 0


def _cmd_distill(args) -> int:
    config = _load(args)
    if args.strategy:
        config = ProtocolConfig.from_dict({**config.to_dict(), "strategy": args.strategy})
    matrix, runner = run_protocol(config, args.seed, out_dir=args.out, resume=args.resume)
    print(summary_table(matrix, config.strategy), end="")
    return 0


def _cmd_eval(args) -> int:
    config = _load(args)
    runner = ProtocolRunner(config, args.seed)
    stage_dir = Path(args.out) / f"stage_{args.stage}"
    model, header = StudentModel.load(stage_dir / "model")
    ids, vecs = load_contexts(stage_dir / "contexts.tsv")
    contexts = dict(zip(ids, vecs))
    specs = [s for stage in runner.stream[: args.stage] for s in stage]
    print("task_id\tsuccess_rate")
    for idx, spec in enumerate(specs):
        rate = rollout_success_batch(
            model,
            spec,
            contexts[spec.task_id],
            config.eval_episodes,
            seed=args.seed * 7919 + idx,
        )
        print(f"{spec.task_id}\t{rate}")
    return 0


def _cmd_select(args) -> int:
    trajs = read_trajectories(args.input)
    chosen, audit = select_replay(
        trajs,
        slice_len=args.slice_len,
        m=args.m,
        strategy=args.strategy,
        seed=args.seed,
    )
    out = args.out or args.input.parent
    out.mkdir(parents=True, exist_ok=True)
    write_audits(out / "selection_audit.tsv", [audit])
    for cid in audit.chosen_ids:
        print(cid)
    return 0


def _cmd_report(args) -> int:
    report_dir = render_report(args.out)
    matrix = MetricsMatrix.load(report_dir / "metrics.tsv")
    strategy = None
    run_json = Path(args.out) / "run.json"
    if run_json.exists():
        import json

        strategy = json.loads(run_json.read_text()).get("strategy")
    print(summary_table(matrix, strategy), end="")
    print(f"report written to {report_dir}")
    return 0


_COMMANDS = {
    "teach": _cmd_teach,
    "distill": _cmd_distill,
    "eval": _cmd_eval,
    "select": _cmd_select,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except Exception as err:  # noqa: BLE001 - CLI boundary
        print(f"cpdistill: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
