"""Read-only rendering of run artifacts: the Acc/BWT table, per-layer
routing-load histograms, the task-embedding dump and its 2-D PCA
projection, and a config echo. Output is tabular text; plotting is left to
external tooling."""
from __future__ import annotations

import json
import shutil
from pathlib import Path

import numpy as np

from .metrics import MetricsMatrix, UndefinedMetricError, accuracy, bwt, pca_project
from .model import StudentModel

__all__ = ["summary_table", "render_report", "load_contexts", "write_routing_histograms"]


def load_contexts(path) -> tuple[list[str], np.ndarray]:
    ids, rows = [], []
    for line in Path(path).read_text().strip().split("\n"):
        cells = line.split("\t")
        ids.append(cells[0])
        rows.append([float(c) for c in cells[1:]])
    return ids, np.asarray(rows)


def summary_table(matrix: MetricsMatrix, strategy: str | None = None) -> str:
    """Per-stage Acc and BWT; BWT is n/a at stage 1 and for the independent
    strategy (no continuity between its per-stage models)."""
    lines = ["stage\tacc\tbwt"]
    for k in matrix.stages():
        acc = accuracy(matrix, k)
        if strategy == "independent":
            b = "n/a"
        else:
            try:
                b = repr(bwt(matrix, k))
            except UndefinedMetricError:
                b = "n/a"
        lines.append(f"{k}\t{repr(acc)}\t{b}")
    return "\n".join(lines) + "\n"


def write_routing_histograms(out_dir: Path, model: StudentModel, windows, z) -> None:
    """Per-layer expert loads on a probe batch."""
    loads = model.routing_loads(windows, z)
    for l, layer_loads in enumerate(loads):
        total = layer_loads.sum()
        lines = ["expert\tload\tfraction"]
        for i, c in enumerate(layer_loads):
            frac = c / total if total else 0.0
            lines.append(f"{i}\t{int(c)}\t{repr(float(frac))}")
        (out_dir / f"routing_layer{l}.tsv").write_text("\n".join(lines) + "\n")


def render_report(run_dir, report_dir=None) -> Path:
    """Render a RunReport directory from a finished (or partial) run."""
    run_dir = Path(run_dir)
    report_dir = Path(report_dir) if report_dir else run_dir / "report"
    report_dir.mkdir(parents=True, exist_ok=True)

    config_path = run_dir / "config.json"
    strategy = None
    if config_path.exists():
        config = json.loads(config_path.read_text())
        strategy = config.get("strategy")
        (report_dir / "config.json").write_text(json.dumps(config, indent=1, sort_keys=True))

    matrix = MetricsMatrix.load(run_dir / "metrics.tsv")
    shutil.copyfile(run_dir / "metrics.tsv", report_dir / "metrics.tsv")
    (report_dir / "summary.tsv").write_text(summary_table(matrix, strategy))

    stages = sorted(
        (int(p.name.split("_")[1]), p)
        for p in run_dir.glob("stage_*")
        if (p / "contexts.tsv").exists()
    )
    if stages:
        last = stages[-1][1]
        shutil.copyfile(last / "contexts.tsv", report_dir / "embeddings.tsv")
        ids, vecs = load_contexts(last / "contexts.tsv")
        if len(ids) >= 2:
            coords, fractions = pca_project(vecs)
            lines = [
                "# explained_variance\t" + "\t".join(repr(float(f)) for f in fractions),
                "task_id\tpc1\tpc2",
            ]
            for tid, (x, y) in zip(ids, coords):
                lines.append(f"{tid}\t{repr(float(x))}\t{repr(float(y))}")
            (report_dir / "embedding_pca.tsv").write_text("\n".join(lines) + "\n")
        if (last / "audits.tsv").exists():
            shutil.copyfile(last / "audits.tsv", report_dir / "audits.tsv")
        for hist in last.glob("routing_layer*.tsv"):
            shutil.copyfile(hist, report_dir / hist.name)
    return report_dir
