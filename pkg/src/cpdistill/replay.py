"""Diversity-aware trajectory selection for the replay buffer.

Each trajectory is featurized as the concatenation of its slice-wise state
means (slice length = the model's sequence length), features are centered
and scaled to unit average norm, and the Gram matrix L = V V^T feeds the
selector. Selection strategies: greedy MAP for a determinantal point
process (log-det gain), farthest-first, seeded random, plus an exhaustive
exact DPP mode for small pools used as the test oracle.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

__all__ = [
    "PoolError",
    "SelectionError",
    "BudgetError",
    "TrajFeature",
    "Kernel",
    "ReplayBuffer",
    "SelectionAudit",
    "featurize",
    "preprocess_features",
    "build_kernel",
    "select",
    "subset_log_det",
    "select_replay",
    "update_buffer",
]

STRATEGIES = ("dpp", "dpp_exact", "ffs", "random")


class PoolError(ValueError):
    """Selection pool is malformed (mixed horizons, dim mismatch, ...)."""


class SelectionError(ValueError):
    """Selection request is unsatisfiable (m out of range, bad strategy)."""


class BudgetError(ValueError):
    """Replay buffer would exceed its budget fraction."""


@dataclass
class TrajFeature:
    v: np.ndarray
    traj_id: str


@dataclass
class Kernel:
    L: np.ndarray

    def check(self, sym_tol: float = 1e-10, psd_tol: float = -1e-8) -> None:
        if not np.allclose(self.L, self.L.T, atol=sym_tol, rtol=0):
            raise PoolError("kernel is not symmetric")
        if np.linalg.eigvalsh(self.L).min() < psd_tol:
            raise PoolError("kernel is not positive semidefinite")


def featurize(traj, slice_len: int) -> TrajFeature:
    """Concatenate per-slice state means; trajectory length must divide."""
    states = np.asarray(traj.states, dtype=np.float64)[: len(traj.actions)]
    h = states.shape[0]
    if h == 0 or h % slice_len != 0:
        raise PoolError(
            f"horizon {h} is not a positive multiple of slice length {slice_len}"
        )
    v = states.reshape(h // slice_len, slice_len, -1).mean(axis=1).reshape(-1)
    tid = f"{getattr(traj, 'task_id', '?')}:{getattr(traj, 'seed', '?')}"
    return TrajFeature(v=v, traj_id=tid)


def preprocess_features(features: np.ndarray) -> np.ndarray:
    """Mean-center and scale to unit average norm (raw state scales vary)."""
    v = np.asarray(features, dtype=np.float64)
    v = v - v.mean(axis=0, keepdims=True)
    avg_norm = np.linalg.norm(v, axis=1).mean()
    if avg_norm > 1e-12:
        v = v / avg_norm
    return v


def build_kernel(features) -> Kernel:
    if isinstance(features[0], TrajFeature):
        features = [f.v for f in features]
    dims = {np.asarray(f).shape for f in features}
    if len(dims) != 1:
        raise PoolError(f"feature dimensions differ across the pool: {dims}")
    v = np.asarray(features, dtype=np.float64)
    l = v @ v.T
    return Kernel(L=(l + l.T) / 2.0)


def subset_log_det(L: np.ndarray, idx) -> float:
    """log det of the principal minor; -inf when singular."""
    idx = np.asarray(sorted(idx), dtype=np.intp)
    sign, logdet = np.linalg.slogdet(L[np.ix_(idx, idx)])
    return logdet if sign > 0 else -np.inf


def _greedy_dpp(L: np.ndarray, m: int, eps: float = 1e-12) -> list[int]:
    """Greedy MAP: repeatedly add the item with the largest log-det gain.

    Incremental Cholesky form: di2[j] tracks the conditional variance of j
    given the current selection, which is exactly the determinant gain.
    Near-singular candidates (gain < eps) are passed over while any
    informative candidate remains.
    """
    n = L.shape[0]
    cis = np.zeros((m, n))
    di2 = np.clip(np.diag(L).copy().astype(np.float64), 0.0, None)
    chosen: list[int] = []
    remaining = np.ones(n, dtype=bool)
    while len(chosen) < m:
        gains = np.where(remaining, di2, -np.inf)
        best = int(np.argmax(gains))  # argmax ties resolve to lowest index
        if gains[best] < eps:
            # everything left is (numerically) dependent; honor the requested
            # m by max-min kernel distance so exact duplicates go last
            while len(chosen) < m:
                best_j, best_d = -1, -np.inf
                for j in range(n):
                    if not remaining[j]:
                        continue
                    if chosen:
                        d = min(L[j, j] - 2.0 * L[j, c] + L[c, c] for c in chosen)
                    else:
                        d = L[j, j]
                    if d > best_d:
                        best_j, best_d = j, d
                chosen.append(best_j)
                remaining[best_j] = False
            break
        k = len(chosen)
        di_opt = np.sqrt(di2[best])
        eis = (L[best, :] - cis[:k, best] @ cis[:k, :]) / di_opt
        cis[k, :] = eis
        di2 = np.clip(di2 - eis * eis, 0.0, None)
        chosen.append(best)
        remaining[best] = False
    return chosen


def _exact_dpp(L: np.ndarray, m: int) -> list[int]:
    n = L.shape[0]
    if n > 15 or m > 5:
        raise SelectionError("exact DPP mode is limited to n <= 15, m <= 5")
    best_det, best_subset = -np.inf, None
    for subset in combinations(range(n), m):
        det = np.linalg.det(L[np.ix_(subset, subset)])
        if det > best_det:
            best_det, best_subset = det, subset
    return list(best_subset)


def _ffs(features: np.ndarray, m: int) -> list[int]:
    norms = np.linalg.norm(features, axis=1)
    chosen = [int(np.argmax(norms))]
    dists = np.linalg.norm(features - features[chosen[0]], axis=1)
    while len(chosen) < m:
        dists[chosen] = -np.inf
        nxt = int(np.argmax(dists))
        chosen.append(nxt)
        dists = np.minimum(dists, np.linalg.norm(features - features[nxt], axis=1))
    return chosen


def select(
    features: np.ndarray,
    m: int,
    strategy: str = "dpp",
    seed: int = 0,
) -> list[int]:
    """Pick m pool indices. Deterministic for a given seed and strategy."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if not 1 <= m <= n:
        raise SelectionError(f"cannot select m={m} from a pool of {n}")
    if strategy == "random":
        rng = np.random.default_rng(seed)
        return [int(i) for i in rng.choice(n, size=m, replace=False)]
    if strategy == "ffs":
        return _ffs(features, m)
    kernel = build_kernel(features)
    if strategy == "dpp":
        return _greedy_dpp(kernel.L, m)
    if strategy == "dpp_exact":
        return _exact_dpp(kernel.L, m)
    raise SelectionError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")


# ---------------------------------------------------------------------------
# buffer plumbing


@dataclass
class ReplayBuffer:
    budget_fraction: float = 0.10
    trajs_by_task: dict = field(default_factory=dict)
    total_distill_seen: int = 0

    @property
    def size(self) -> int:
        return sum(len(v) for v in self.trajs_by_task.values())

    def all_trajectories(self) -> list:
        out = []
        for task in self.trajs_by_task:
            out.extend(self.trajs_by_task[task])
        return out


@dataclass
class SelectionAudit:
    stage: int
    task_id: str
    strategy: str
    seed: int
    chosen_ids: list[str]
    log_det: float


def update_buffer(buffer: ReplayBuffer, n_new_distill: int, task_id: str, selected: list) -> ReplayBuffer:
    """Register distill data seen and append the selected trajectories,
    enforcing size <= budget_fraction * total seen."""
    buffer.total_distill_seen += int(n_new_distill)
    projected = buffer.size + len(selected)
    allowed = buffer.budget_fraction * buffer.total_distill_seen
    if projected > allowed + 1e-9:
        raise BudgetError(
            f"buffer of {projected} would exceed {buffer.budget_fraction:.0%} "
            f"of {buffer.total_distill_seen} distill trajectories"
        )
    if selected:
        buffer.trajs_by_task.setdefault(task_id, []).extend(selected)
    return buffer


def select_replay(
    trajs: list,
    slice_len: int,
    m: int,
    strategy: str = "dpp",
    seed: int = 0,
    stage: int = 0,
) -> tuple[list, SelectionAudit]:
    """Full pipeline for one task: featurize, preprocess, select, audit."""
    feats = [featurize(t, slice_len) for t in trajs]
    dims = {f.v.shape for f in feats}
    if len(dims) != 1:
        raise PoolError("mixed horizons in one selection pool")
    raw = np.stack([f.v for f in feats])
    prepped = preprocess_features(raw)
    idx = select(prepped, m, strategy=strategy, seed=seed)
    log_det = subset_log_det(build_kernel(prepped).L, idx)
    chosen = [trajs[i] for i in idx]
    audit = SelectionAudit(
        stage=stage,
        task_id=getattr(trajs[0], "task_id", "?"),
        strategy=strategy,
        seed=seed,
        chosen_ids=[feats[i].traj_id for i in idx],
        log_det=log_det,
    )
    return chosen, audit
