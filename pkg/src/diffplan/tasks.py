"""Synthetic multi-task 2-D control suite sharing one action space.

Every task takes actions in [-1, 1]^2 and moves an agent inside the arena
[-1, 1]^2.  Tasks differ in state layout, dynamics speed and reward.
Per-step rewards are shaped distances clipped to [-2, 0]; the step on which
success first latches earns an extra +1.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from diffplan.errors import EpisodeDoneError

ACTION_DIM = 2
ARENA = 1.0
REWARD_MIN = -2.0
SUCCESS_BONUS = 1.0
DEFAULT_EPISODE_LENGTH = 50


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    S: int
    dynamics: str  # "point" | "push"
    reward: str  # "distance" | "obstacle" | "push"
    vel_scale: float = 0.1
    success_radius: float = 0.05
    L: int = DEFAULT_EPISODE_LENGTH
    A: int = ACTION_DIM
    init_low: tuple[float, ...] = (-0.1, -0.1)
    init_high: tuple[float, ...] = (0.1, 0.1)
    goal_random: bool = True
    # random goals: uniform direction, distance from the origin uniform in this range
    goal_distance: tuple[float, float] = (0.6, 0.8)
    fixed_goal: tuple[float, float] = (0.5, 0.0)
    obstacle_center: tuple[float, float] = (0.3, 0.3)
    obstacle_radius: float = 0.2
    obstacle_penalty: float = 1.0
    contact_radius: float = 0.1

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("episode length must be >= 1")
        if self.A != ACTION_DIM:
            raise ValueError(f"all tasks share action dim {ACTION_DIM}")

    @property
    def step_reward_bounds(self) -> tuple[float, float]:
        return REWARD_MIN, SUCCESS_BONUS

    @property
    def return_bounds(self) -> tuple[float, float]:
        return self.L * REWARD_MIN, SUCCESS_BONUS


@dataclass
class EnvState:
    spec: TaskSpec
    t: int
    s: np.ndarray
    goal: np.ndarray
    rng: np.random.Generator
    done: bool = False
    success: bool = False
    info: dict = field(default_factory=dict)

    @property
    def task_id(self) -> str:
        return self.spec.task_id


def register_default_suite(episode_length: int = DEFAULT_EPISODE_LENGTH) -> list[TaskSpec]:
    L = episode_length
    return [
        TaskSpec("reach", S=4, dynamics="point", reward="distance", vel_scale=0.05, L=L),
        TaskSpec("reach-obstacle", S=6, dynamics="point", reward="obstacle", vel_scale=0.025, L=L),
        TaskSpec(
            "push",
            S=4,
            dynamics="push",
            reward="push",
            L=L,
            goal_random=False,
            fixed_goal=(0.4, 0.0),
            init_low=(-0.7, -0.1, -0.3, -0.1),
            init_high=(-0.5, 0.1, -0.1, 0.1),
        ),
        TaskSpec("slow-reach", S=4, dynamics="point", reward="distance", vel_scale=0.025, L=L),
    ]


def suite_by_id(suite: list[TaskSpec]) -> dict[str, TaskSpec]:
    return {spec.task_id: spec for spec in suite}


def get_task(suite: list[TaskSpec], task_id: str) -> TaskSpec:
    table = suite_by_id(suite)
    if task_id not in table:
        raise KeyError(f"unknown task_id {task_id!r}; known: {sorted(table)}")
    return table[task_id]


def _observe(spec: TaskSpec, body: np.ndarray, goal: np.ndarray) -> np.ndarray:
    if spec.dynamics == "push":
        return body.copy()
    parts = [body, goal]
    if spec.reward == "obstacle":
        parts.append(np.asarray(spec.obstacle_center))
    return np.concatenate(parts)


def _sample_goal(spec: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    if not spec.goal_random:
        return np.asarray(spec.fixed_goal, dtype=np.float64)
    lo, hi = spec.goal_distance
    while True:
        radius = rng.uniform(lo, hi)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        goal = radius * np.array([np.cos(angle), np.sin(angle)])
        if spec.reward != "obstacle":
            return goal
        # goals inside the penalty disk are unreachable without penalty
        if np.linalg.norm(goal - spec.obstacle_center) > spec.obstacle_radius + spec.success_radius:
            return goal


def reset(spec: TaskSpec, seed) -> EnvState:
    rng = np.random.default_rng(seed)
    body = rng.uniform(spec.init_low, spec.init_high)
    goal = _sample_goal(spec, rng)
    return EnvState(spec=spec, t=0, s=_observe(spec, body, goal), goal=goal, rng=rng)


def _reward(spec: TaskSpec, s: np.ndarray, goal: np.ndarray) -> tuple[float, bool]:
    """Shaped reward (before bonus) and whether the success predicate holds."""
    if spec.dynamics == "push":
        agent, puck = s[:2], s[2:4]
        d_goal = float(np.linalg.norm(puck - goal))
        cost = d_goal + 0.5 * float(np.linalg.norm(agent - puck))
    else:
        d_goal = float(np.linalg.norm(s[:2] - goal))
        cost = d_goal
        if spec.reward == "obstacle":
            if np.linalg.norm(s[:2] - spec.obstacle_center) < spec.obstacle_radius:
                cost += spec.obstacle_penalty
    return max(-cost, REWARD_MIN), d_goal < spec.success_radius


def _move(spec: TaskSpec, s: np.ndarray, action: np.ndarray) -> np.ndarray:
    body = s[: 4 if spec.dynamics == "push" else 2].copy()
    agent = np.clip(body[:2] + spec.vel_scale * action, -ARENA, ARENA)
    if spec.dynamics != "push":
        return agent
    puck = body[2:4]
    if np.linalg.norm(puck - agent) < spec.contact_radius:
        # push along the line from the pre-move agent position so a fast agent
        # cannot tunnel through the puck
        gap = puck - body[:2]
        dist = float(np.linalg.norm(gap))
        direction = gap / dist if dist > 1e-12 else action / (np.linalg.norm(action) + 1e-12)
        puck = np.clip(agent + spec.contact_radius * direction, -ARENA, ARENA)
    return np.concatenate([agent, puck])


def step(state: EnvState, action) -> tuple[EnvState, float, bool, bool]:
    """Advance one step; returns ``(next_state, reward, done, success)``.

    The input state is not modified.  Success latches: once true it stays true
    for the rest of the episode.
    """
    if state.done:
        raise EpisodeDoneError(f"episode of task {state.task_id!r} is already done")
    spec = state.spec
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (spec.A,):
        raise ValueError(f"action must have shape ({spec.A},), got {action.shape}")
    if not np.all(np.isfinite(action)):
        raise ValueError("action contains non-finite values")
    action = np.clip(action, -1.0, 1.0)
    body = _move(spec, state.s, action)
    s_next = _observe(spec, body, state.goal)
    reward, hit = _reward(spec, s_next, state.goal)
    success = state.success or hit
    if success and not state.success:
        reward += SUCCESS_BONUS
    t = state.t + 1
    done = t >= spec.L
    nxt = replace(state, t=t, s=s_next, done=done, success=success, info={})
    return nxt, reward, done, success


# -- scripted controllers ------------------------------------------------------


def _toward(delta: np.ndarray, vel_scale: float, gain: float = 1.0) -> np.ndarray:
    a = gain * delta / vel_scale
    # shrink uniformly so the direction survives the [-1, 1] box
    return a / max(1.0, float(np.max(np.abs(a))))


def scripted_action(state: EnvState) -> np.ndarray:
    """Proportional controller that solves every task in the default suite."""
    spec = state.spec
    s = state.s
    if spec.dynamics == "push":
        return _push_controller(spec, s[:2], s[2:4], state.goal)
    pos = s[:2]
    target = state.goal
    if spec.reward == "obstacle":
        target = _detour(spec, pos, state.goal)
    return _toward(target - pos, spec.vel_scale)


def _detour(spec: TaskSpec, pos: np.ndarray, goal: np.ndarray) -> np.ndarray:
    center = np.asarray(spec.obstacle_center)
    margin = spec.obstacle_radius + 0.08
    seg = goal - pos
    seg_len = float(np.linalg.norm(seg))
    if seg_len < 1e-9:
        return goal
    u = seg / seg_len
    proj = float(np.dot(center - pos, u))
    if proj <= 0 or proj >= seg_len:
        return goal
    closest = pos + proj * u
    off = closest - center
    if np.linalg.norm(off) >= margin:
        return goal
    normal = np.array([-u[1], u[0]])
    side = 1.0 if np.dot(off, normal) >= 0 else -1.0
    return center + side * margin * normal


def _push_controller(spec: TaskSpec, agent, puck, goal) -> np.ndarray:
    to_goal = goal - puck
    dist = float(np.linalg.norm(to_goal))
    if dist < 1e-9:
        return np.zeros(2)
    u = to_goal / dist
    r = spec.contact_radius
    behind = puck - (r + 0.02) * u
    rel = agent - puck
    if float(np.dot(rel, u)) > -0.5 * r:
        # in front of or beside the puck: go around it first
        normal = np.array([-u[1], u[0]])
        side = 1.0 if np.dot(rel, normal) >= 0 else -1.0
        waypoint = puck + side * 2.0 * r * normal - r * u
        return _toward(waypoint - agent, spec.vel_scale)
    if np.linalg.norm(agent - behind) > 0.03:
        return _toward(behind - agent, spec.vel_scale)
    # aligned behind the puck: push through, stopping when the puck reaches the goal
    travel = dist + float(np.linalg.norm(rel)) - r
    return _toward(u * travel, spec.vel_scale)


def random_action(rng: np.random.Generator, A: int = ACTION_DIM) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=A)
