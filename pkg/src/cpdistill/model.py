"""The student: a decoder-only pre-norm Transformer whose feed-forward
sublayers are sparse mixture-of-experts layers.

Tokens are per-timestep observations concatenated with the task context
vector. Each block is h' = MSA(LN(h)) + h followed by h'' = MoE(LN(h')) + h'
under a causal mask; the action mean is a linear head on the final token.
Experts can be added at stage boundaries with noisy-copy weights and a
strongly negative gate bias so routing is initially undisturbed, and a
two-phase trainability schedule controls which parameter groups move during
each continual-learning stage.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_groups, save_groups
from .optim import ParamGroup
from .taskctx import TaskEncoder
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "ExpansionConfig",
    "GatingStats",
    "MoELayer",
    "StudentModel",
    "SequenceLengthError",
    "MaskScheduleError",
    "aux_loss",
    "moe_route",
    "expand_experts",
    "apply_mask_schedule",
]


class SequenceLengthError(ValueError):
    """Input sequence exceeds the model's window; caller must truncate."""


class MaskScheduleError(ValueError):
    """Requested trainability phase is invalid for the stage."""


@dataclass
class ModelConfig:
    obs_dim: int
    action_dim: int
    hidden_dim: int = 256
    depth: int = 5
    experts_per_layer: int = 8
    mlp_multiplier: int = 4
    top_k: int = 1
    seq_len: int = 20
    task_embed_dim: int = 16
    n_heads: int = 4
    causal: bool = True
    use_aux: bool = True
    stats_chunks: int = 8
    encoder_hidden: int = 64
    dtype: str = "float64"

    def __post_init__(self):
        dims = (
            self.obs_dim,
            self.action_dim,
            self.hidden_dim,
            self.depth,
            self.experts_per_layer,
            self.mlp_multiplier,
            self.top_k,
            self.seq_len,
            self.task_embed_dim,
            self.n_heads,
        )
        if any(d < 1 for d in dims):
            raise ValueError("all model dimensions must be positive")
        if self.top_k > self.experts_per_layer:
            raise ValueError("top_k cannot exceed the number of experts")
        if self.hidden_dim % self.n_heads:
            raise ValueError("hidden_dim must be divisible by n_heads")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    @property
    def input_width(self) -> int:
        return self.obs_dim + self.task_embed_dim


@dataclass
class ExpansionConfig:
    experts_added: int = 1          # per layer, per stage
    init_noise_std: float = 1e-2
    cold_start_bias: float = -5.0
    gate_col_noise_std: float = 1e-2

    def __post_init__(self):
        if self.experts_added < 0:
            raise ValueError("experts_added must be >= 0")
        if not self.cold_start_bias < 0:
            raise ValueError("cold_start_bias must be negative")


@dataclass
class GatingStats:
    """Per-expert routing statistics for one MoE layer over a token batch."""

    loads: np.ndarray       # assigned token counts (not differentiable)
    importance: Tensor      # summed gating probabilities (differentiable)
    tokens: int


@dataclass
class Expert:
    w1: ParamGroup
    b1: ParamGroup
    w2: ParamGroup
    b2: ParamGroup

    def __call__(self, x: Tensor) -> Tensor:
        h = T.gelu(x @ self.w1.tensor + self.b1.tensor)
        return h @ self.w2.tensor + self.b2.tensor

    @property
    def groups(self) -> list[ParamGroup]:
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass
class MoELayer:
    gate_w: ParamGroup
    gate_b: ParamGroup
    experts: list[Expert]

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def gate_frozen(self) -> bool:
        return not self.gate_w.trainable

    def expert_frozen(self, i: int) -> bool:
        return not self.experts[i].w1.trainable


def moe_route(x: Tensor, layer: MoELayer, k: int) -> tuple[Tensor, GatingStats]:
    """Route a (tokens, hidden) batch through the layer's experts.

    Gate probabilities are a softmax over all experts; the top-k by logit
    (ties to the lowest index) are kept and their probabilities renormalized.
    Gradients reach the gate only through the selected probabilities.
    """
    n = layer.n_experts
    if k > n:
        raise T.DimensionError(f"top_k={k} exceeds {n} experts")
    logits = x @ layer.gate_w.tensor + layer.gate_b.tensor
    p_full = T.softmax(logits, axis=-1)
    sel = T.topk_indices(logits.data, k)
    mask = np.zeros(logits.shape, dtype=x.dtype)
    np.put_along_axis(mask, sel, 1.0, axis=1)
    p_masked = p_full * Tensor(mask)
    denom = T.tsum(p_masked, axis=1, keepdims=True)
    p_norm = p_masked / denom

    m_tokens = x.shape[0]
    out: Tensor | None = None
    for i in range(n):
        rows = np.nonzero(mask[:, i])[0]
        if rows.size == 0:
            continue
        xi = T.take_rows(x, rows)
        wi = T.take_rows(p_norm[:, i : i + 1], rows)
        scattered = T.put_rows(layer.experts[i](xi) * wi, rows, m_tokens)
        out = scattered if out is None else out + scattered
    assert out is not None
    stats = GatingStats(
        loads=mask.sum(axis=0),
        importance=T.tsum(p_full, axis=0),
        tokens=m_tokens,
    )
    return out, stats


def aux_loss(stats: GatingStats, eps: float = 1e-9) -> Tensor:
    """Load-balancing penalty: half the sum of the normalized variances of
    per-expert loads and importances. Gradient flows only through the
    importances; loads are counts."""
    c = np.asarray(stats.loads, dtype=np.float64)
    cbar = c.mean()
    c_term = ((c - cbar) ** 2).sum() / (cbar * cbar + eps)
    p = stats.importance
    pbar = T.tmean(p)
    dev = p - pbar
    p_term = T.tsum(dev * dev) / (pbar * pbar + eps)
    return (p_term + float(c_term)) * 0.5


class StudentModel:
    """Owner of all parameter groups, including the task-embedding encoder."""

    def __init__(
        self,
        config: ModelConfig,
        seed: int = 0,
        expert_counts: Sequence[int] | None = None,
    ):
        self.config = config
        self.expert_counts = (
            list(expert_counts)
            if expert_counts is not None
            else [config.experts_per_layer] * config.depth
        )
        # first expert index considered "new" in the current stage, per layer
        self.new_expert_start = list(self.expert_counts)
        self.params: dict[str, ParamGroup] = {}
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xC0)))
        d = config.hidden_dim
        self._add("embed.w", rng.normal(0.0, 0.02, (config.input_width, d)))
        self._add("embed.b", np.zeros(d))
        self._add("pos", rng.normal(0.0, 0.02, (config.seq_len, d)))
        self.layers: list[MoELayer] = []
        self._attn: list[dict[str, ParamGroup]] = []
        for l in range(config.depth):
            pre = f"blocks.{l}"
            self._add(f"{pre}.ln1.g", np.ones(d))
            self._add(f"{pre}.ln1.b", np.zeros(d))
            attn = {}
            for nm in ("wq", "wk", "wv", "wo"):
                attn[nm] = self._add(f"{pre}.attn.{nm}", rng.normal(0.0, 0.02, (d, d)))
            for nm in ("bq", "bk", "bv", "bo"):
                attn[nm] = self._add(f"{pre}.attn.{nm}", np.zeros(d))
            self._attn.append(attn)
            self._add(f"{pre}.ln2.g", np.ones(d))
            self._add(f"{pre}.ln2.b", np.zeros(d))
            n_exp = self.expert_counts[l]
            gate_w = self._add(f"{pre}.gate.w", rng.normal(0.0, 0.02, (d, n_exp)))
            gate_b = self._add(f"{pre}.gate.b", np.zeros(n_exp))
            experts = [
                self._make_expert(l, i, rng.normal(0.0, 0.02, (d, d * config.mlp_multiplier)),
                                  rng.normal(0.0, 0.02, (d * config.mlp_multiplier, d)))
                for i in range(n_exp)
            ]
            self.layers.append(MoELayer(gate_w, gate_b, experts))
        self._add("head.w", rng.normal(0.0, 0.02, (d, config.action_dim)))
        self._add("head.b", np.zeros(config.action_dim))
        self._masks: dict[int, np.ndarray] = {}
        self.encoder = TaskEncoder(
            input_dim=config.stats_chunks * (config.obs_dim + config.action_dim + 1),
            hidden_dim=config.encoder_hidden,
            embed_dim=config.task_embed_dim,
            rng=rng,
            dtype=config.np_dtype,
        )
        for g in self.encoder.groups:
            self.params[g.name] = g

    def _add(self, name: str, data: np.ndarray) -> ParamGroup:
        group = ParamGroup(name, Tensor(np.asarray(data, dtype=self.config.np_dtype)))
        self.params[name] = group
        return group

    def _make_expert(self, layer: int, idx: int, w1: np.ndarray, w2: np.ndarray) -> Expert:
        pre = f"blocks.{layer}.experts.{idx}"
        return Expert(
            self._add(f"{pre}.w1", w1),
            self._add(f"{pre}.b1", np.zeros(w1.shape[1])),
            self._add(f"{pre}.w2", w2),
            self._add(f"{pre}.b2", np.zeros(w2.shape[1])),
        )

    # ------------------------------------------------------------------
    # forward paths

    def groups(self) -> list[ParamGroup]:
        return list(self.params.values())

    def embed_input(self, windows: np.ndarray, z: np.ndarray) -> Tensor:
        """(B, t, obs) states + (B, embed) contexts -> (B, t, hidden) tokens."""
        windows = np.asarray(windows, dtype=self.config.np_dtype)
        z = np.asarray(z, dtype=self.config.np_dtype)
        b, t = windows.shape[0], windows.shape[1]
        if t < 1:
            raise SequenceLengthError("empty input window")
        if t > self.config.seq_len:
            raise SequenceLengthError(
                f"window of {t} states exceeds seq_len={self.config.seq_len}; "
                "caller must truncate to the most recent states"
            )
        zrep = np.broadcast_to(z[:, None, :], (b, t, z.shape[-1]))
        x = np.concatenate([windows, zrep], axis=2)
        if x.shape[-1] != self.config.input_width:
            raise T.DimensionError(
                f"token width {x.shape[-1]} != obs+embed {self.config.input_width}"
            )
        tokens = Tensor(x) @ self.params["embed.w"].tensor + self.params["embed.b"].tensor
        return tokens + self.params["pos"].tensor[0:t]

    def _attention(self, x: Tensor, l: int) -> Tensor:
        cfg = self.config
        b, t, d = x.shape
        h, dh = cfg.n_heads, d // cfg.n_heads
        p = self._attn[l]

        def heads(v: Tensor) -> Tensor:
            return T.transpose(T.reshape(v, (b, t, h, dh)), (0, 2, 1, 3))

        q = heads(x @ p["wq"].tensor + p["bq"].tensor)
        k = heads(x @ p["wk"].tensor + p["bk"].tensor)
        v = heads(x @ p["wv"].tensor + p["bv"].tensor)
        scores = (q @ T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        if cfg.causal and t > 1:
            if t not in self._masks:
                self._masks[t] = np.triu(
                    np.full((t, t), -1e9, dtype=cfg.np_dtype), k=1
                )
            scores = scores + Tensor(self._masks[t])
        attn = T.softmax(scores, axis=-1)
        merged = T.reshape(T.transpose(attn @ v, (0, 2, 1, 3)), (b, t, d))
        return merged @ p["wo"].tensor + p["bo"].tensor

    def block_forward(self, h: Tensor, l: int) -> tuple[Tensor, GatingStats]:
        pre = f"blocks.{l}"
        ln1 = T.layer_norm(h, self.params[f"{pre}.ln1.g"].tensor, self.params[f"{pre}.ln1.b"].tensor)
        h2 = self._attention(ln1, l) + h
        ln2 = T.layer_norm(h2, self.params[f"{pre}.ln2.g"].tensor, self.params[f"{pre}.ln2.b"].tensor)
        b, t, d = h2.shape
        flat = T.reshape(ln2, (b * t, d))
        routed, stats = moe_route(flat, self.layers[l], self.config.top_k)
        return T.reshape(routed, (b, t, d)) + h2, stats

    def forward(
        self, windows: np.ndarray, z: np.ndarray
    ) -> tuple[Tensor, Tensor, list[GatingStats]]:
        """Returns (action means (B, act), mean aux loss, per-layer stats)."""
        h = self.embed_input(windows, z)
        all_stats: list[GatingStats] = []
        for l in range(self.config.depth):
            h, stats = self.block_forward(h, l)
            all_stats.append(stats)
        last = h[:, -1, :]
        actions = last @ self.params["head.w"].tensor + self.params["head.b"].tensor
        if self.config.use_aux:
            terms = [aux_loss(s) for s in all_stats]
            total = terms[0]
            for term in terms[1:]:
                total = total + term
            aux = total * (1.0 / len(terms))
        else:
            aux = Tensor(np.zeros((), dtype=self.config.np_dtype))
        return actions, aux, all_stats

    def predict_action(self, window: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Action mean for one state window; no squashing, callers clip."""
        window = np.asarray(window, dtype=self.config.np_dtype)
        if window.ndim != 2 or window.shape[0] < 1:
            raise SequenceLengthError("predict_action needs a nonempty (t, obs) window")
        with T.no_grad():
            actions, _, _ = self.forward(window[None], np.asarray(z)[None])
        return actions.data[0]

    def predict_batch(self, windows: np.ndarray, z: np.ndarray) -> np.ndarray:
        with T.no_grad():
            actions, _, _ = self.forward(windows, z)
        return actions.data

    def routing_loads(self, windows: np.ndarray, z: np.ndarray) -> list[np.ndarray]:
        with T.no_grad():
            _, _, stats = self.forward(windows, z)
        return [s.loads.copy() for s in stats]

    # ------------------------------------------------------------------
    # persistence

    def save(self, path, stage: int = 0, extra: dict | None = None) -> None:
        header = {
            "config": asdict(self.config),
            "expert_counts": list(self.expert_counts),
            "new_expert_start": list(self.new_expert_start),
            "stage": stage,
        }
        if extra:
            header.update(extra)
        save_groups(path, self.groups(), extra=header)

    @classmethod
    def load(cls, path) -> tuple["StudentModel", dict]:
        groups, header = load_groups(path)
        config = ModelConfig(**header["config"])
        model = cls(config, seed=0, expert_counts=header["expert_counts"])
        model.new_expert_start = list(header["new_expert_start"])
        by_name = {g.name: g for g in groups}
        if set(by_name) != set(model.params):
            raise ValueError("checkpoint group names do not match the model layout")
        for name, group in model.params.items():
            group.tensor.data = by_name[name].tensor.data
            group.set_trainable(by_name[name].trainable)
        return model, header

    def clone(self) -> "StudentModel":
        twin = StudentModel(self.config, seed=0, expert_counts=self.expert_counts)
        twin.new_expert_start = list(self.new_expert_start)
        for name, group in twin.params.items():
            group.tensor.data = self.params[name].tensor.data.copy()
            group.set_trainable(self.params[name].trainable)
        return twin

    def snapshot(self, names: Sequence[str] | None = None) -> dict[str, np.ndarray]:
        names = list(names) if names is not None else list(self.params)
        return {n: self.params[n].tensor.data.copy() for n in names}


# ---------------------------------------------------------------------------
# incremental expansion


def expand_experts(
    model: StudentModel, cfg: ExpansionConfig, seed: int = 0
) -> list[ParamGroup]:
    """Add cfg.experts_added experts to every layer.

    New expert weights are a seeded uniformly-chosen existing expert's
    weights plus Gaussian noise; the gate gains a noise-initialized column
    per new expert and a strongly negative bias entry so routing is
    initially undisturbed. Returns the newly created parameter groups
    (optimizer state for them starts at zero)."""
    if cfg.experts_added == 0:
        return []
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xE)))
    new_groups: list[ParamGroup] = []
    for l, layer in enumerate(model.layers):
        n_old = layer.n_experts
        model.new_expert_start[l] = n_old
        for j in range(cfg.experts_added):
            src = layer.experts[int(rng.integers(0, n_old))]
            pieces = []
            for g in (src.w1, src.b1, src.w2, src.b2):
                data = g.tensor.data.copy()
                if cfg.init_noise_std > 0:
                    data = data + rng.normal(0.0, cfg.init_noise_std, data.shape)
                pieces.append(data)
            expert = model._make_expert(l, n_old + j, pieces[0], pieces[2])
            expert.b1.tensor.data = pieces[1]
            expert.b2.tensor.data = pieces[3]
            layer.experts.append(expert)
            new_groups.extend(expert.groups)
        d = model.config.hidden_dim
        cols = rng.normal(0.0, cfg.gate_col_noise_std, (d, cfg.experts_added))
        layer.gate_w.tensor.data = np.concatenate(
            [layer.gate_w.tensor.data, cols], axis=1
        )
        layer.gate_b.tensor.data = np.concatenate(
            [layer.gate_b.tensor.data, np.full(cfg.experts_added, cfg.cold_start_bias)]
        )
        model.expert_counts[l] = layer.n_experts
    return new_groups


# ---------------------------------------------------------------------------
# trainability schedule

_BACKBONE_MARKS = (".ln1.", ".ln2.", ".attn.")


def _is_backbone(name: str) -> bool:
    return (
        name.startswith(("embed.", "pos", "head."))
        or any(mark in name for mark in _BACKBONE_MARKS)
    )


def apply_mask_schedule(model: StudentModel, stage: int, phase: int) -> None:
    """Set every group's trainability for (stage, phase).

    Stage 1 trains everything. From stage 2 on the backbone (embeddings,
    positions, layer norms, attention, action head) is permanently frozen;
    phase 1 trains the gate, the new experts and the task encoder with old
    experts frozen, and phase 2 freezes the gate and unfreezes all experts.
    """
    if stage < 1:
        raise MaskScheduleError("stage index starts at 1")
    if phase not in (1, 2):
        raise MaskScheduleError(f"unknown phase {phase}")
    if stage == 1:
        if phase == 2:
            raise MaskScheduleError("stage 1 has no phase 2")
        for g in model.params.values():
            g.set_trainable(True)
        return
    for name, g in model.params.items():
        if _is_backbone(name):
            g.set_trainable(False)
        elif name.startswith("taskenc."):
            g.set_trainable(True)
    for l, layer in enumerate(model.layers):
        gate_on = phase == 1
        layer.gate_w.set_trainable(gate_on)
        layer.gate_b.set_trainable(gate_on)
        for i, expert in enumerate(layer.experts):
            expert_on = phase == 2 or i >= model.new_expert_start[l]
            for grp in expert.groups:
                grp.set_trainable(expert_on)
