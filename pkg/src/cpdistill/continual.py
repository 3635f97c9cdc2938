"""Stage orchestration: collect teacher data, train the student under the
chosen strategy, evaluate, select replay, and checkpoint.

Strategies
    ours         expert expansion + two-phase masks + replay mixing
    finetune     sequential training, no anti-forgetting machinery
    ewc          quadratic penalty against Fisher-weighted anchors
    kl           penalty toward the previous stage's action means
    replay_only  replay mixing without expansion or masks
    expert_only  expansion + masks without replay
    independent  a fresh student per stage (plasticity reference; BWT n/a)

Within a stage the phase schedule is epoch-gated: phase 1 is epoch 1
(gate + new experts + task encoder train, old experts frozen), phase 2 is
every later epoch (gate frozen, all experts train). The backbone is frozen
permanently after stage 1. The contrastive objective runs jointly with
distillation during stage 1 and during epoch 1 of later stages.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import tensor as T
from .checkpoint import load_groups, load_optimizer, save_groups, save_optimizer
from .config import LambdaSchedule, ProtocolConfig, save_config
from .metrics import MetricsMatrix
from .model import (
    StudentModel,
    apply_mask_schedule,
    expand_experts,
)
from .optim import AdamW, ParamGroup
from .replay import ReplayBuffer, SelectionAudit, select_replay, update_buffer
from .taskctx import ContextProvider, ContrastiveBatch, infonce_loss, traj_stats
from .teachers import (
    TaskSpec,
    TeacherPolicy,
    Trajectory,
    collect,
    initial_state,
    make_task_stream,
    read_trajectories,
    task_target,
    write_trajectories,
)
from .tensor import Tensor

__all__ = [
    "InputError",
    "StateError",
    "StageConfig",
    "EWCState",
    "CallCounters",
    "DistillDataset",
    "anneal_lambda",
    "distill_loss",
    "estimate_fisher",
    "ewc_penalty",
    "kl_penalty",
    "rollout_success_batch",
    "ProtocolRunner",
    "run_protocol",
]


class InputError(ValueError):
    """Training batch is unusable."""


class StateError(ValueError):
    """Strategy state (EWC anchors, KL snapshot) missing or inconsistent."""


@dataclass
class StageConfig:
    index: int
    task_ids: list[str]
    epochs: int = 2
    batch_size: int = 128
    lr: float = 1e-4
    episodes_per_task: int = 96
    replay_m: int = 8
    strategy: str = "ours"

    def __post_init__(self):
        if self.index < 1:
            raise ValueError("stage index starts at 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0 (0 is the debug no-train mode)")


@dataclass
class EWCState:
    anchors: dict[str, np.ndarray]
    fisher: dict[str, np.ndarray]
    lam: float = 100.0


@dataclass(frozen=True)
class StrategyTraits:
    expand_and_mask: bool = False
    replay: bool = False
    ewc: bool = False
    kl: bool = False
    fresh_model: bool = False


STRATEGY_TRAITS = {
    "ours": StrategyTraits(expand_and_mask=True, replay=True),
    "finetune": StrategyTraits(),
    "ewc": StrategyTraits(ewc=True),
    "kl": StrategyTraits(kl=True),
    "replay_only": StrategyTraits(replay=True),
    "expert_only": StrategyTraits(expand_and_mask=True),
    "independent": StrategyTraits(fresh_model=True),
}


@dataclass
class CallCounters:
    """Strategy-isolation instrumentation (which code paths actually ran)."""

    expansions: int = 0
    replay_selections: int = 0


# ---------------------------------------------------------------------------
# deterministic seed derivation (stage-scoped so resumed runs are bit-equal)

_COLLECT, _TRAIN, _SELECT, _EXPAND, _EVAL, _INIT, _FISHER = 1, 2, 3, 4, 5, 6, 7


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=tuple(key)))


def _int_seed(*key) -> int:
    return int(np.random.SeedSequence(entropy=tuple(key)).generate_state(1)[0] & 0x7FFFFFFF)


# ---------------------------------------------------------------------------
# training data


class DistillDataset:
    """(window, context index, teacher action) samples bucketed by window
    length so batches need no padding and gating stats see no pad tokens."""

    def __init__(self, trajs: list[Trajectory], seq_len: int, task_ids: list[str]):
        if not trajs:
            raise InputError("no trajectories to train on")
        self.task_ids = list(task_ids)
        index = {tid: i for i, tid in enumerate(self.task_ids)}
        self.uids: list[str] = []
        raw: dict[int, list] = {}
        for traj in trajs:
            uid = len(self.uids)
            self.uids.append(f"{traj.task_id}:{traj.seed}")
            tix = index[traj.task_id]
            for t in range(len(traj.actions)):
                length = min(t + 1, seq_len)
                raw.setdefault(length, []).append(
                    (traj.states[t + 1 - length : t + 1], traj.actions[t], tix, uid)
                )
        self.buckets: dict[int, SimpleNamespace] = {}
        for length in sorted(raw):
            rows = raw[length]
            self.buckets[length] = SimpleNamespace(
                windows=np.stack([r[0] for r in rows]),
                targets=np.stack([r[1] for r in rows]),
                task_idx=np.array([r[2] for r in rows], dtype=np.intp),
                uid=np.array([r[3] for r in rows], dtype=np.intp),
            )

    @property
    def n_samples(self) -> int:
        return sum(b.windows.shape[0] for b in self.buckets.values())

    def batches_per_epoch(self, batch_size: int) -> int:
        return sum(
            -(-b.windows.shape[0] // batch_size) for b in self.buckets.values()
        )

    def epoch_batches(self, rng: np.random.Generator, batch_size: int):
        """One full shuffled pass: every sample appears exactly once."""
        plan = []
        for length in sorted(self.buckets):
            bucket = self.buckets[length]
            perm = rng.permutation(bucket.windows.shape[0])
            for lo in range(0, perm.size, batch_size):
                plan.append((length, perm[lo : lo + batch_size]))
        order = rng.permutation(len(plan))
        for i in order:
            length, rows = plan[i]
            bucket = self.buckets[length]
            yield SimpleNamespace(
                length=length,
                windows=bucket.windows[rows],
                targets=bucket.targets[rows],
                task_idx=bucket.task_idx[rows],
                uid=bucket.uid[rows],
            )


# ---------------------------------------------------------------------------
# loss surfaces


def anneal_lambda(schedule: LambdaSchedule, t: int) -> float:
    return schedule.value(t)


def distill_loss(
    model: StudentModel,
    windows: np.ndarray,
    contexts: np.ndarray,
    targets: np.ndarray,
    lam: float,
) -> Tensor:
    """Batch mean of per-sample sum-of-squares action error, plus the
    annealed load-balancing term averaged over MoE layers."""
    if len(windows) == 0:
        raise InputError("empty distillation batch")
    actions, aux, _ = model.forward(windows, contexts)
    diff = actions - Tensor(np.asarray(targets, dtype=actions.dtype))
    loss = T.tmean(T.tsum(diff * diff, axis=1))
    if model.config.use_aux and lam != 0.0:
        loss = loss + aux * lam
    return loss


def estimate_fisher(model: StudentModel, batches, lam: float = 0.0) -> dict[str, np.ndarray]:
    """Diagonal Fisher surrogate: per-parameter mean squared gradient of the
    training loss over the given batches."""
    trainless = [g for g in model.groups() if g.trainable]
    sums = {g.name: np.zeros_like(g.tensor.data) for g in trainless}
    count = 0
    for batch in batches:
        for g in trainless:
            g.tensor.grad = None
        loss = distill_loss(model, batch.windows, batch.contexts, batch.targets, lam)
        loss.backward()
        for g in trainless:
            if g.tensor.grad is not None:
                sums[g.name] += g.tensor.grad**2
        count += 1
    if count == 0:
        raise InputError("fisher estimation needs at least one batch")
    return {name: s / count for name, s in sums.items()}


def ewc_penalty(model: StudentModel, state: EWCState) -> Tensor:
    """(lam/2) * sum_i F_i (theta_i - anchor_i)^2 over anchored groups."""
    total: Tensor | None = None
    for name, anchor in state.anchors.items():
        group = model.params.get(name)
        if group is None or group.tensor.data.shape != anchor.shape:
            raise StateError(f"EWC anchor for {name} does not match the model")
        d = group.tensor - Tensor(anchor)
        term = T.tsum(Tensor(state.fisher[name]) * d * d)
        total = term if total is None else total + term
    if total is None:
        raise StateError("EWC state has no anchors")
    return total * (state.lam / 2.0)


def kl_penalty(
    model: StudentModel,
    prev_model: StudentModel | None,
    windows: np.ndarray,
    contexts: np.ndarray,
    sigma0: float = 1.0,
) -> Tensor:
    """Closed-form KL between fixed-variance Gaussians with shared sigma0:
    mean over the batch of ||mu_new - mu_old||^2 / (2 sigma0^2)."""
    if prev_model is None:
        raise StateError("KL penalty needs the previous stage's snapshot")
    with T.no_grad():
        mu_old, _, _ = prev_model.forward(windows, contexts)
    actions, _, _ = model.forward(windows, contexts)
    diff = actions - Tensor(mu_old.data)
    return T.tmean(T.tsum(diff * diff, axis=1)) * (1.0 / (2.0 * sigma0**2))


# ---------------------------------------------------------------------------
# evaluation (episodes stepped in lockstep; one batched forward per step)


def rollout_success_batch(
    model: StudentModel,
    spec: TaskSpec,
    z: np.ndarray,
    n_episodes: int,
    seed: int,
) -> float:
    seq_len = model.config.seq_len
    states = np.stack([initial_state(spec, seed + i) for i in range(n_episodes)])
    history = [states.copy()]
    zb = np.broadcast_to(z, (n_episodes, z.size))
    for t in range(spec.horizon):
        lo = max(0, t + 1 - seq_len)
        window = np.stack(history[lo : t + 1], axis=1)
        actions = np.clip(model.predict_batch(window, zb), -1.0, 1.0)
        pos = states[:, :2] + actions @ spec.gain.T
        states = np.concatenate([pos, states[:, 2:4]], axis=1)
        history.append(states.copy())
    targets = np.stack([task_target(spec, s[2:4]) for s in states])
    dists = np.linalg.norm(states[:, :2] - targets, axis=1)
    return float((dists < spec.success_threshold).mean())


# ---------------------------------------------------------------------------
# the protocol runner


class ProtocolRunner:
    def __init__(self, config: ProtocolConfig, seed: int, out_dir=None):
        self.config = config
        self.seed = seed
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.traits = STRATEGY_TRAITS[config.strategy]
        self.suite = config.suite_config()
        self.model_cfg = config.model_config()
        if self.suite.horizon % self.model_cfg.seq_len:
            raise ValueError("suite horizon must be a multiple of the model seq_len")
        self.stream = make_task_stream(
            self.suite, config.n_stages, config.tasks_per_stage, seed
        )
        self.schedule = config.schedule()
        self.matrix = MetricsMatrix()
        self.counters = CallCounters()
        self.audits: list[SelectionAudit] = []
        self.buffer = ReplayBuffer(budget_fraction=config.budget_fraction)
        self.global_step = 0
        self.ewc_state: EWCState | None = None
        self.prev_model: StudentModel | None = None
        self.stage_data: dict[str, list[Trajectory]] = {}
        self._seen: list[TaskSpec] = []
        self._fresh_student(_INIT, 0)

    def _fresh_student(self, tag: int, stage: int) -> None:
        self.model = StudentModel(self.model_cfg, seed=_int_seed(self.seed, stage, tag))
        self.optimizer = AdamW(
            self.model.groups(),
            lr=self.config.lr,
            weight_decay=self.config.weight_decay,
        )
        self.provider = ContextProvider(
            self.model.encoder, n_chunks=self.model_cfg.stats_chunks
        )

    def stage_config(self, k: int) -> StageConfig:
        cfg = self.config
        return StageConfig(
            index=k,
            task_ids=[s.task_id for s in self.stream[k - 1]],
            epochs=cfg.epochs_stage1 if k == 1 else cfg.epochs_later,
            batch_size=cfg.batch_size,
            lr=cfg.lr,
            episodes_per_task=cfg.episodes_per_task,
            replay_m=cfg.replay_m,
            strategy=cfg.strategy,
        )

    # ------------------------------------------------------------------

    def run(self, resume: bool = False) -> MetricsMatrix:
        start = 1
        if resume:
            start = self._resume() + 1
        for k in range(start, self.config.n_stages + 1):
            self.run_stage(self.stage_config(k), self.stream[k - 1])
        return self.matrix

    def run_stage(self, stage: StageConfig, specs: list[TaskSpec]) -> dict[str, float]:
        k = stage.index
        traits = self.traits
        if traits.fresh_model and k >= 2:
            self._fresh_student(_INIT, k)

        for spec in specs:
            self.matrix.add_task(spec.task_id, k)
            self._seen.append(spec)

        # 1. collect teacher demonstrations
        self.stage_data = {}
        for spec in specs:
            ordinal = len(self._seen) - len(specs) + specs.index(spec)
            trajs = collect(
                spec,
                TeacherPolicy(spec),
                stage.episodes_per_task,
                base_seed=_int_seed(self.seed, k, _COLLECT, ordinal),
                workers=self.config.workers,
                noise_std=self.config.teacher_noise,
            )
            self.stage_data[spec.task_id] = trajs
            self.provider.set_support(spec.task_id, trajs[: self.config.support_episodes])

        # 2. expansion + phase-1 masks
        if traits.expand_and_mask and k >= 2:
            new_groups = expand_experts(
                self.model, self.config.expansion_config(), seed=_int_seed(self.seed, k, _EXPAND)
            )
            self.counters.expansions += 1
            for g in new_groups:
                self.optimizer.add_group(g)
            apply_mask_schedule(self.model, k, 1)

        # 3. training pool: current distill data plus the whole replay buffer
        train_trajs = [t for spec in specs for t in self.stage_data[spec.task_id]]
        if traits.replay:
            train_trajs = train_trajs + self.buffer.all_trajectories()
        present = {t.task_id for t in train_trajs}
        data_task_ids = [s.task_id for s in self._seen if s.task_id in present]
        dataset = DistillDataset(train_trajs, self.model_cfg.seq_len, data_task_ids)
        nce_stats = np.stack(
            [traj_stats(t, self.model_cfg.stats_chunks) for t in train_trajs]
        )
        nce_labels = np.array([data_task_ids.index(t.task_id) for t in train_trajs])

        # 4. epochs
        rng = _rng(self.seed, k, _TRAIN)
        current_ids = [s.task_id for s in specs]
        steps = 0
        capped = False
        for epoch in range(1, stage.epochs + 1):
            if traits.expand_and_mask and k >= 2 and epoch == 2:
                apply_mask_schedule(self.model, k, 2)
            self.provider.refresh(current_ids)
            ctx = self.provider.context_matrix(data_task_ids)
            infonce_on = (k == 1 or epoch == 1) and self.config.infonce_weight > 0
            for batch in dataset.epoch_batches(rng, stage.batch_size):
                if self.config.max_steps is not None and steps >= self.config.max_steps:
                    capped = True
                    break
                self._train_step(batch, ctx, infonce_on, nce_stats, nce_labels, rng)
                steps += 1
            if capped:
                break
        self.provider.refresh(current_ids)

        # 5. evaluate everything seen so far
        rates: dict[str, float] = {}
        for idx, spec in enumerate(self._seen):
            if traits.fresh_model and spec.task_id not in current_ids:
                rate = self.matrix.value(
                    self.matrix.intro_stage[self.matrix.task_ids.index(spec.task_id)],
                    spec.task_id,
                )
            else:
                rate = rollout_success_batch(
                    self.model,
                    spec,
                    self.provider.get(spec.task_id),
                    self.config.eval_episodes,
                    seed=_int_seed(self.seed, k, _EVAL, idx),
                )
            self.matrix.record(k, spec.task_id, rate)
            rates[spec.task_id] = rate

        # 6. replay selection from this stage's data (after training)
        if traits.replay:
            for spec in specs:
                pool = self.stage_data[spec.task_id]
                if stage.replay_m == 0:
                    update_buffer(self.buffer, len(pool), spec.task_id, [])
                    continue
                chosen, audit = select_replay(
                    pool,
                    slice_len=self.model_cfg.seq_len,
                    m=stage.replay_m,
                    strategy=self.config.replay_strategy,
                    seed=_int_seed(self.seed, k, _SELECT, specs.index(spec)),
                    stage=k,
                )
                self.counters.replay_selections += 1
                update_buffer(self.buffer, len(pool), spec.task_id, chosen)
                self.audits.append(audit)

        # 7. strategy state for the next stage
        if traits.ewc:
            fisher_batches = self._fisher_batches(dataset, rng=_rng(self.seed, k, _FISHER))
            fisher = estimate_fisher(
                self.model, fisher_batches, lam=self.schedule.value(self.global_step)
            )
            anchors = {
                g.name: g.tensor.data.copy() for g in self.model.groups() if g.trainable
            }
            self.ewc_state = EWCState(anchors, fisher, lam=self.config.ewc_lambda)
        if traits.kl:
            self.prev_model = self.model.clone()

        if self.out_dir is not None:
            self._write_stage(k)
        return rates

    # ------------------------------------------------------------------

    def _train_step(self, batch, ctx, infonce_on, nce_stats, nce_labels, rng) -> None:
        self.optimizer.zero_grad()
        lam = self.schedule.value(self.global_step)
        loss = distill_loss(
            self.model, batch.windows, ctx[batch.task_idx], batch.targets, lam
        )
        if infonce_on:
            idx = self._nce_sample(rng, nce_labels)
            if idx is not None:
                z = self.model.encoder.encode(nce_stats[idx])
                nce = infonce_loss(
                    ContrastiveBatch(z, nce_labels[idx], self.config.infonce_tau)
                )
                loss = loss + nce * self.config.infonce_weight
        if self.traits.ewc and self.ewc_state is not None:
            loss = loss + ewc_penalty(self.model, self.ewc_state)
        if self.traits.kl and self.prev_model is not None:
            loss = loss + kl_penalty(
                self.model,
                self.prev_model,
                batch.windows,
                ctx[batch.task_idx],
                self.config.kl_sigma0,
            )
        loss.backward()
        self.optimizer.step()
        self.global_step += 1

    def _nce_sample(self, rng, labels) -> np.ndarray | None:
        """Round-robin over tasks so every batch holds positives and,
        when more than one task exists, negatives."""
        size = min(self.config.infonce_trajs, labels.size)
        per_label = []
        for lab in np.unique(labels):
            idx = np.nonzero(labels == lab)[0]
            per_label.append(idx[rng.permutation(idx.size)])
        if len(per_label) == 1 and per_label[0].size < 2:
            return None
        order = []
        depth = 0
        while len(order) < size:
            added = False
            for idx in per_label:
                if depth < idx.size:
                    order.append(idx[depth])
                    added = True
                    if len(order) == size:
                        break
            if not added:
                break
            depth += 1
        return np.array(order, dtype=np.intp)

    def _fisher_batches(self, dataset: DistillDataset, rng) -> list:
        ctx = self.provider.context_matrix(dataset.task_ids)
        out = []
        for batch in dataset.epoch_batches(rng, self.config.batch_size):
            out.append(
                SimpleNamespace(
                    windows=batch.windows,
                    contexts=ctx[batch.task_idx],
                    targets=batch.targets,
                )
            )
            if len(out) >= self.config.ewc_batches:
                break
        return out

    # ------------------------------------------------------------------
    # artifacts

    def _stage_dir(self, k: int) -> Path:
        return self.out_dir / f"stage_{k}"

    def _write_stage(self, k: int) -> None:
        d = self._stage_dir(k)
        d.mkdir(parents=True, exist_ok=True)
        self.model.save(d / "model", stage=k)
        save_optimizer(d / "optimizer", self.optimizer)
        write_trajectories(d / "buffer.jsonl", self.buffer.all_trajectories())
        self.matrix.save(d / "metrics.tsv")
        self._write_contexts(d / "contexts.tsv")
        write_audits(d / "audits.tsv", self.audits)
        if self.ewc_state is not None:
            save_groups(
                d / "fisher",
                [
                    ParamGroup(name, Tensor(f), trainable=False)
                    for name, f in self.ewc_state.fisher.items()
                ],
            )
        self._write_routing(d)
        state = {
            "stage": k,
            "global_step": self.global_step,
            "strategy": self.config.strategy,
            "seed": self.seed,
            "total_distill_seen": self.buffer.total_distill_seen,
            "counters": {
                "expansions": self.counters.expansions,
                "replay_selections": self.counters.replay_selections,
            },
        }
        (d / "state.json").write_text(json.dumps(state, indent=1, sort_keys=True))

    def _write_routing(self, d: Path) -> None:
        """Per-layer expert loads on a fixed probe: one full-length window
        per distill trajectory of the current stage."""
        windows, zs = [], []
        for tid, trajs in sorted(self.stage_data.items()):
            z = self.provider.get(tid)
            for traj in trajs[:16]:
                windows.append(traj.states[: self.model_cfg.seq_len])
                zs.append(z)
        if not windows:
            return
        loads = self.model.routing_loads(np.stack(windows), np.stack(zs))
        for l, layer_loads in enumerate(loads):
            total = layer_loads.sum()
            lines = ["expert\tload\tfraction"]
            for i, c in enumerate(layer_loads):
                frac = c / total if total else 0.0
                lines.append(f"{i}\t{int(c)}\t{repr(float(frac))}")
            (d / f"routing_layer{l}.tsv").write_text("\n".join(lines) + "\n")

    def _write_contexts(self, path: Path) -> None:
        lines = []
        for tid in self.matrix.task_ids:
            if tid in self.provider.cache:
                vec = self.provider.cache[tid]
                lines.append(tid + "\t" + "\t".join(repr(float(v)) for v in vec))
        path.write_text("\n".join(lines) + "\n")

    def _resume(self) -> int:
        """Load the newest complete stage checkpoint; returns its index
        (0 when nothing to resume)."""
        if self.out_dir is None or not self.out_dir.exists():
            return 0
        done = sorted(
            int(p.name.split("_")[1])
            for p in self.out_dir.glob("stage_*")
            if (p / "state.json").exists()
        )
        if not done:
            return 0
        k = done[-1]
        d = self._stage_dir(k)
        state = json.loads((d / "state.json").read_text())
        if state["strategy"] != self.config.strategy or state["seed"] != self.seed:
            raise StateError("checkpoint strategy/seed do not match this run")
        self.model, _ = StudentModel.load(d / "model")
        self.optimizer = load_optimizer(d / "optimizer", self.model.groups())
        self.provider = ContextProvider(
            self.model.encoder, n_chunks=self.model_cfg.stats_chunks
        )
        self.matrix = MetricsMatrix.load(d / "metrics.tsv")
        for line in (d / "contexts.tsv").read_text().strip().split("\n"):
            cells = line.split("\t")
            self.provider.cache[cells[0]] = np.array([float(c) for c in cells[1:]])
        self.buffer = ReplayBuffer(budget_fraction=self.config.budget_fraction)
        for traj in read_trajectories(d / "buffer.jsonl"):
            self.buffer.trajs_by_task.setdefault(traj.task_id, []).append(traj)
        self.buffer.total_distill_seen = state["total_distill_seen"]
        self.global_step = state["global_step"]
        self.counters = CallCounters(**state["counters"])
        self._seen = [s for stage in self.stream[:k] for s in stage]
        if self.traits.ewc and (d / "fisher").exists():
            groups, _ = load_groups(d / "fisher")
            fisher = {g.name: g.tensor.data for g in groups}
            anchors = {
                g.name: g.tensor.data.copy() for g in self.model.groups() if g.name in fisher
            }
            self.ewc_state = EWCState(anchors, fisher, lam=self.config.ewc_lambda)
        if self.traits.kl:
            self.prev_model = self.model.clone()
        return k


def write_audits(path, audits: list[SelectionAudit]) -> None:
    lines = ["stage\ttask_id\tstrategy\tseed\tlog_det\tchosen_ids"]
    for a in audits:
        lines.append(
            f"{a.stage}\t{a.task_id}\t{a.strategy}\t{a.seed}\t"
            f"{repr(float(a.log_det))}\t{';'.join(a.chosen_ids)}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def run_protocol(
    config: ProtocolConfig, seed: int, out_dir=None, resume: bool = False
) -> tuple[MetricsMatrix, ProtocolRunner]:
    """Run the full staged protocol; writes checkpoints and artifacts when
    out_dir is given and echoes the config for reproducibility."""
    runner = ProtocolRunner(config, seed, out_dir=out_dir)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        save_config(Path(out_dir) / "config.json", config)
        (Path(out_dir) / "run.json").write_text(
            json.dumps({"seed": seed, "strategy": config.strategy}, indent=1)
        )
    matrix = runner.run(resume=resume)
    if out_dir is not None:
        matrix.save(Path(out_dir) / "metrics.tsv")
    return matrix, runner
