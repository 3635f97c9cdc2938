"""Synthetic task suite with scripted optimal controllers.

Ten parametric families over a 2-D point mass stand in for robot
manipulation tasks: the observation is (position, episode goal), but what
"solving" the task means — reach the goal, reach a fixed offset from it,
its sign-flip or mirror image, approach it through a detour waypoint, or
move under rotated/slow dynamics — is family-specific and never visible in
the observation. That forces the student to infer the task from context,
while all families share the same move-toward-a-point primitive.

Teachers are deterministic proportional controllers toward the current
waypoint; an optional Gaussian action-noise knob models imperfect teachers.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "ConfigError",
    "EpisodeError",
    "SuiteConfig",
    "TaskSpec",
    "Trajectory",
    "TeacherPolicy",
    "FAMILIES",
    "make_task_stream",
    "initial_state",
    "task_target",
    "step",
    "expert_action",
    "rollout_episode",
    "collect",
    "evaluate_policy",
    "write_trajectories",
    "read_trajectories",
]


class ConfigError(ValueError):
    """Suite/stream configuration is unsatisfiable."""


class EpisodeError(RuntimeError):
    """An episode failed twice during collection."""


def _rot(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])


# family -> (target_mode, offset, detour, gain, kappa)
FAMILIES: dict[str, dict] = {
    "reach": dict(target_mode="direct", offset=(0.0, 0.0), detour=(0.0, 0.0), gain=0.08 * np.eye(2), kappa=4.0),
    "reach-north": dict(target_mode="offset", offset=(0.0, 0.35), detour=(0.0, 0.0), gain=0.08 * np.eye(2), kappa=4.0),
    "reach-east": dict(target_mode="offset", offset=(0.35, 0.0), detour=(0.0, 0.0), gain=0.08 * np.eye(2), kappa=4.0),
    "flip": dict(target_mode="flip", offset=(0.0, 0.0), detour=(0.0, 0.0), gain=0.08 * np.eye(2), kappa=4.0),
    "half": dict(target_mode="half", offset=(0.0, 0.0), detour=(0.0, 0.0), gain=0.08 * np.eye(2), kappa=4.0),
    "push-north": dict(target_mode="direct", offset=(0.0, 0.0), detour=(0.0, 0.30), gain=0.08 * np.eye(2), kappa=4.0),
    "push-east": dict(target_mode="direct", offset=(0.0, 0.0), detour=(0.30, 0.0), gain=0.08 * np.eye(2), kappa=4.0),
    "spin": dict(target_mode="direct", offset=(0.0, 0.0), detour=(0.0, 0.0), gain=0.08 * _rot(25.0), kappa=4.0),
    "creep": dict(target_mode="direct", offset=(0.0, 0.0), detour=(0.0, 0.0), gain=0.05 * np.eye(2), kappa=6.0),
    "mirror": dict(target_mode="mirror", offset=(0.0, 0.0), detour=(0.0, 0.0), gain=0.08 * np.eye(2), kappa=4.0),
}


@dataclass
class SuiteConfig:
    obs_dim: int = 4
    action_dim: int = 2
    horizon: int = 40
    success_threshold: float = 0.05
    start_range: float = 0.35       # start positions uniform in [-r, r]^2
    goal_ring: tuple[float, float] = (0.30, 0.55)
    goal_radius: float = 0.12       # per-episode jitter around the task center
    gamma: float = 0.99
    teacher_noise: float = 0.0
    max_tasks: int = 50
    seq_len: int = 20               # horizon must be a multiple of this

    def __post_init__(self):
        if self.horizon % self.seq_len:
            raise ConfigError("horizon must be a multiple of seq_len for replay slicing")
        if self.success_threshold <= 0:
            raise ConfigError("success threshold must be positive")


@dataclass
class TaskSpec:
    task_id: str
    family: str
    goal_center: np.ndarray
    goal_radius: float
    gain: np.ndarray
    offset: np.ndarray
    detour: np.ndarray
    target_mode: str
    kappa: float
    obs_dim: int = 4
    action_dim: int = 2
    horizon: int = 40
    success_threshold: float = 0.05
    reward_id: str = "neg_distance"
    gamma: float = 0.99
    start_range: float = 0.35

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        for key in ("goal_center", "gain", "offset", "detour"):
            out[key] = np.asarray(out[key]).tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        for key in ("goal_center", "gain", "offset", "detour"):
            d[key] = np.asarray(d[key], dtype=np.float64)
        return cls(**d)


@dataclass
class Trajectory:
    task_id: str
    seed: int
    states: np.ndarray   # (H+1, obs_dim)
    actions: np.ndarray  # (H, action_dim), clipped to [-1, 1]
    rewards: np.ndarray  # (H,)
    success: bool


@dataclass
class TeacherPolicy:
    """Proportional controller toward the current waypoint."""

    spec: TaskSpec
    kappa: float | None = None

    def __call__(self, state: np.ndarray) -> np.ndarray:
        return expert_action(self.spec, state, kappa=self.kappa)


def make_task_stream(
    suite: SuiteConfig, n_stages: int, tasks_per_stage: int, seed: int
) -> list[list[TaskSpec]]:
    """Deterministic stream of task specs grouped into stages."""
    total = n_stages * tasks_per_stage
    if total > suite.max_tasks:
        raise ConfigError(
            f"{n_stages} stages x {tasks_per_stage} tasks oversubscribes the "
            f"suite ({suite.max_tasks} tasks max)"
        )
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0x57)))
    names = list(FAMILIES)
    order = [names[i] for i in rng.permutation(len(names))]
    specs = []
    for i in range(total):
        family = order[i % len(order)]
        fam = FAMILIES[family]
        angle = rng.uniform(0.0, 2 * np.pi)
        radius = rng.uniform(*suite.goal_ring)
        center = radius * np.array([np.cos(angle), np.sin(angle)])
        specs.append(
            TaskSpec(
                task_id=f"{family}-{i:02d}",
                family=family,
                goal_center=center,
                goal_radius=suite.goal_radius,
                gain=np.array(fam["gain"], dtype=np.float64),
                offset=np.asarray(fam["offset"], dtype=np.float64),
                detour=np.asarray(fam["detour"], dtype=np.float64),
                target_mode=fam["target_mode"],
                kappa=float(fam["kappa"]),
                obs_dim=suite.obs_dim,
                action_dim=suite.action_dim,
                horizon=suite.horizon,
                success_threshold=suite.success_threshold,
                gamma=suite.gamma,
                start_range=suite.start_range,
            )
        )
    return [specs[k * tasks_per_stage : (k + 1) * tasks_per_stage] for k in range(n_stages)]


# ---------------------------------------------------------------------------
# dynamics


def task_target(spec: TaskSpec, goal: np.ndarray) -> np.ndarray:
    """The point the task actually rewards, given the observed goal."""
    if spec.target_mode == "direct":
        return goal
    if spec.target_mode == "offset":
        return goal + spec.offset
    if spec.target_mode == "flip":
        return -goal
    if spec.target_mode == "half":
        return 0.5 * goal
    if spec.target_mode == "mirror":
        return np.array([-goal[0], goal[1]])
    raise ConfigError(f"unknown target mode {spec.target_mode}")


def initial_state(spec: TaskSpec, seed: int) -> np.ndarray:
    """Seeded episode initialization: start position, then goal jitter."""
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-spec.start_range, spec.start_range, 2)
    jitter_angle = rng.uniform(0.0, 2 * np.pi)
    jitter_r = spec.goal_radius * np.sqrt(rng.uniform())
    goal = spec.goal_center + jitter_r * np.array(
        [np.cos(jitter_angle), np.sin(jitter_angle)]
    )
    return np.concatenate([pos, goal])


def step(
    spec: TaskSpec, state: np.ndarray, action: np.ndarray, t: int | None = None
) -> tuple[np.ndarray, float, bool]:
    """Point-mass dynamics: pos' = pos + gain @ clip(action)."""
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    pos, goal = state[:2], state[2:4]
    new_pos = pos + spec.gain @ a
    reward = -float(np.linalg.norm(new_pos - task_target(spec, goal)))
    done = t is not None and t + 1 >= spec.horizon
    return np.concatenate([new_pos, goal]), reward, done


_ALIGN_EPS = 0.04


def _current_waypoint(spec: TaskSpec, pos: np.ndarray, goal: np.ndarray) -> np.ndarray:
    target = task_target(spec, goal)
    if not spec.detour.any():
        return target
    w0 = target - spec.detour
    axis = 0 if spec.detour[0] else 1  # detour axis; the other must align
    cross = 1 - axis
    aligned = abs(pos[cross] - target[cross]) < _ALIGN_EPS
    past = pos[axis] >= w0[axis] - _ALIGN_EPS
    return target if (aligned and past) else w0


def expert_action(spec: TaskSpec, state: np.ndarray, kappa: float | None = None) -> np.ndarray:
    """clip(kappa * (waypoint - position)); memoryless and deterministic."""
    k = spec.kappa if kappa is None else kappa
    pos, goal = np.asarray(state)[:2], np.asarray(state)[2:4]
    return np.clip(k * (_current_waypoint(spec, pos, goal) - pos), -1.0, 1.0)


def rollout_episode(
    spec: TaskSpec, policy, seed: int, noise_std: float = 0.0
) -> Trajectory:
    """One seeded episode under a state-history policy."""
    state = initial_state(spec, seed)
    noise_rng = np.random.default_rng((seed, 0xA0)) if noise_std > 0 else None
    states = [state]
    actions, rewards = [], []
    for t in range(spec.horizon):
        action = np.asarray(policy(np.asarray(states)), dtype=np.float64)
        if noise_rng is not None:
            action = action + noise_rng.normal(0.0, noise_std, spec.action_dim)
        action = np.clip(action, -1.0, 1.0)
        state, reward, _ = step(spec, state, action, t)
        states.append(state)
        actions.append(action)
        rewards.append(reward)
    terminal = states[-1]
    dist = np.linalg.norm(terminal[:2] - task_target(spec, terminal[2:4]))
    return Trajectory(
        task_id=spec.task_id,
        seed=seed,
        states=np.asarray(states),
        actions=np.asarray(actions),
        rewards=np.asarray(rewards),
        success=bool(dist < spec.success_threshold),
    )


class _LastState:
    """Adapts a per-state controller to the state-history policy interface."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, history: np.ndarray) -> np.ndarray:
        return self.fn(history[-1])


def collect(
    spec: TaskSpec,
    teacher,
    n_episodes: int,
    base_seed: int,
    workers: int = 1,
    noise_std: float = 0.0,
) -> list[Trajectory]:
    """Teacher rollouts with per-episode seeds base_seed + i; output order is
    by episode index whatever the worker count."""
    if n_episodes < 1:
        raise ConfigError("collect needs n_episodes >= 1")
    policy = _LastState(teacher) if not _wants_history(teacher) else teacher

    def run(i: int) -> Trajectory:
        seed = base_seed + i
        try:
            return rollout_episode(spec, policy, seed, noise_std)
        except Exception:
            try:
                return rollout_episode(spec, policy, seed, noise_std)
            except Exception as err:  # pragma: no cover - defensive
                raise EpisodeError(f"episode seed={seed} failed twice: {err}") from err

    if workers <= 1:
        return [run(i) for i in range(n_episodes)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, range(n_episodes)))


def _wants_history(policy) -> bool:
    return isinstance(policy, _LastState) or getattr(policy, "takes_history", False)


def evaluate_policy(policy, spec: TaskSpec, n_episodes: int, seed: int) -> float:
    """Fraction of seeded episodes ending within the success threshold.

    ``policy`` maps a (t+1, obs_dim) state history to an action; wrap
    per-state controllers with ``TeacherPolicy`` or pass them directly
    (they are adapted automatically).
    """
    if n_episodes < 1:
        raise ConfigError("evaluate_policy needs n_episodes >= 1")
    wrapped = policy if _wants_history(policy) else _LastState(policy)
    hits = 0
    for i in range(n_episodes):
        hits += rollout_episode(spec, wrapped, seed + i).success
    return hits / n_episodes


# ---------------------------------------------------------------------------
# trajectory files (one JSON record per line; floats round-trip exactly)


def write_trajectories(path, trajs: list[Trajectory]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for t in trajs:
            fh.write(
                json.dumps(
                    {
                        "task_id": t.task_id,
                        "seed": t.seed,
                        "states": t.states.tolist(),
                        "actions": t.actions.tolist(),
                        "rewards": t.rewards.tolist(),
                        "success": t.success,
                    }
                )
                + "\n"
            )


def read_trajectories(path) -> list[Trajectory]:
    out = []
    with Path(path).open() as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(
                Trajectory(
                    task_id=rec["task_id"],
                    seed=int(rec["seed"]),
                    states=np.asarray(rec["states"], dtype=np.float64),
                    actions=np.asarray(rec["actions"], dtype=np.float64),
                    rewards=np.asarray(rec["rewards"], dtype=np.float64),
                    success=bool(rec["success"]),
                )
            )
    return out
