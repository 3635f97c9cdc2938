"""Run manifest: every knob of a protocol run in one JSON-serializable
dataclass tree.

Top-level keys
    strategy            one of: ours, finetune, ewc, kl, replay_only,
                        expert_only, independent
    n_stages / tasks_per_stage
                        stream shape (stages x new tasks per stage)
    episodes_per_task   teacher episodes collected per task per stage
    support_episodes    leading episodes used to infer the task context
    eval_episodes       rollouts per task when measuring success rates
    epochs_stage1 / epochs_later
                        training passes for stage 1 / stages >= 2 (phase 1 is
                        epoch 1, phase 2 the rest)
    batch_size / lr / weight_decay
                        optimizer settings (AdamW)
    max_steps           optional cap on optimizer steps per stage
    replay_m            trajectories selected per task per stage
    replay_strategy     dpp | ffs | random
    budget_fraction     replay buffer cap as a fraction of distill data seen
    workers             parallel teacher-collection workers
    teacher_noise       optional Gaussian action-noise std for teachers
    infonce_tau / infonce_weight / infonce_trajs
                        contrastive objective temperature, loss weight and
                        per-step trajectory batch size
    ewc_lambda / ewc_batches
                        EWC penalty weight and Fisher-estimate batch count
    kl_sigma0           shared Gaussian std in the KL baseline penalty
    model               ModelConfig fields (hidden_dim, depth,
                        experts_per_layer, mlp_multiplier, top_k, seq_len,
                        task_embed_dim, n_heads, causal, use_aux,
                        stats_chunks, encoder_hidden)
    suite               SuiteConfig fields (obs_dim, action_dim, horizon,
                        success_threshold, start_range, goal_ring,
                        goal_radius, gamma, teacher_noise, max_tasks, seq_len)
    lambda_schedule     start / step_decrement / floor
    expansion           experts_added / init_noise_std / cold_start_bias /
                        gate_col_noise_std
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .model import ExpansionConfig, ModelConfig
from .teachers import SuiteConfig

__all__ = ["LambdaSchedule", "ProtocolConfig", "load_config", "save_config", "desk_config"]

STRATEGIES = ("ours", "finetune", "ewc", "kl", "replay_only", "expert_only", "independent")


@dataclass
class LambdaSchedule:
    start: float = 0.01
    step_decrement: float = 5e-5
    floor: float = 1e-4

    def value(self, t: int) -> float:
        if t < 0:
            raise ValueError("schedule step must be >= 0")
        return max(self.floor, self.start - t * self.step_decrement)


@dataclass
class ProtocolConfig:
    strategy: str = "ours"
    n_stages: int = 5
    tasks_per_stage: int = 2
    episodes_per_task: int = 96
    support_episodes: int = 8
    eval_episodes: int = 16
    epochs_stage1: int = 16
    epochs_later: int = 8
    batch_size: int = 128
    lr: float = 1e-4
    weight_decay: float = 0.0
    max_steps: int | None = None
    replay_m: int = 8
    replay_strategy: str = "dpp"
    budget_fraction: float = 0.10
    workers: int = 1
    teacher_noise: float = 0.0
    infonce_tau: float = 0.1
    infonce_weight: float = 1.0
    infonce_trajs: int = 32
    ewc_lambda: float = 100.0
    ewc_batches: int = 8
    kl_sigma0: float = 1.0
    model: dict = field(default_factory=dict)
    suite: dict = field(default_factory=dict)
    lambda_schedule: dict = field(default_factory=dict)
    expansion: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; one of {STRATEGIES}")
        if self.replay_m > self.budget_fraction * self.episodes_per_task:
            raise ValueError(
                f"replay_m={self.replay_m} exceeds the {self.budget_fraction:.0%} "
                f"budget for {self.episodes_per_task} episodes per task"
            )

    def suite_config(self) -> SuiteConfig:
        overrides = dict(self.suite)
        if "goal_ring" in overrides:
            overrides["goal_ring"] = tuple(overrides["goal_ring"])
        cfg = SuiteConfig(**overrides)
        if "seq_len" not in overrides:
            cfg.seq_len = self.model_config().seq_len
        return cfg

    def model_config(self) -> ModelConfig:
        suite = dict(self.suite)
        base = dict(
            obs_dim=suite.get("obs_dim", 4),
            action_dim=suite.get("action_dim", 2),
        )
        base.update(self.model)
        return ModelConfig(**base)

    def schedule(self) -> LambdaSchedule:
        return LambdaSchedule(**self.lambda_schedule)

    def expansion_config(self) -> ExpansionConfig:
        return ExpansionConfig(**self.expansion)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ProtocolConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def load_config(path) -> ProtocolConfig:
    return ProtocolConfig.from_dict(json.loads(Path(path).read_text()))


def save_config(path, config: ProtocolConfig) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True))


def desk_config(strategy: str = "ours") -> ProtocolConfig:
    """Desk-scale defaults: small model, 5 stages x 2 synthetic tasks."""
    return ProtocolConfig(
        strategy=strategy,
        model=dict(hidden_dim=64, depth=2, experts_per_layer=4, n_heads=4),
    )
