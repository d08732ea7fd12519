"""Receding-horizon episode execution shared by evaluation and fine-tuning."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from diffplan import tasks
from diffplan.datagen import pad_state
from diffplan.denoiser import Checkpoint, DenoiserParams
from diffplan.diffusion import DenoisingTrace, sample_action_sequence
from diffplan.schedule import NoiseSchedule, SamplerPlan, build_schedule, ddim_subsequence, with_variance_floor, with_x0_clip
from diffplan.tasks import EnvState, TaskSpec


@dataclass
class RolloutSegment:
    s_hist: np.ndarray
    trace: DenoisingTrace | None
    seg_reward: float
    t: int
    episode_id: int
    rewards: list[float] = field(default_factory=list)

    @property
    def a0(self) -> np.ndarray:
        return self.trace.a0


@dataclass
class Episode:
    episode_id: int
    segments: list[RolloutSegment]
    episode_return: float
    success: bool
    states: list[np.ndarray]
    actions: list[np.ndarray]
    rewards: list[float]
    successes: list[bool] = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.actions)


class DiffusionPlanner:
    """Samples action sequences from a denoiser under a fixed sampler plan."""

    def __init__(self, params: DenoiserParams, schedule: NoiseSchedule, plan: SamplerPlan):
        self.params = params
        self.schedule = schedule
        self.plan = plan

    @property
    def H(self) -> int:
        return self.params.config.H

    @property
    def T_o(self) -> int:
        return self.params.config.T_o

    @property
    def S(self) -> int:
        return self.params.config.S

    def __call__(self, s_hist, rng, envs=None, record=False):
        return sample_action_sequence(self.params, s_hist, self.schedule, self.plan, rng, record=record)


def planner_from_checkpoint(
    ckpt: Checkpoint, ddim_steps: int = 10, eta: float = 1.0, min_std: float = 0.0, clip_x0: float = 1.0
):
    schedule = build_schedule(ckpt.schedule, ckpt.K)
    plan = with_x0_clip(with_variance_floor(ddim_subsequence(schedule, ddim_steps, eta), min_std), clip_x0)
    return DiffusionPlanner(ckpt.params, schedule, plan)


class ScriptedPlanner:
    """Wraps the scripted controller as an open-loop planner by simulating ahead."""

    def __init__(self, H: int, T_o: int, S: int):
        self.H, self.T_o, self.S = H, T_o, S

    def __call__(self, s_hist, rng, envs=None, record=False):
        out = np.zeros((len(envs), self.H, tasks.ACTION_DIM))
        for b, env in enumerate(envs):
            sim = env
            for h in range(self.H):
                a = tasks.scripted_action(sim)
                out[b, h] = a
                if sim.done:
                    break
                sim, *_ = tasks.step(sim, a)
                if sim.done:
                    out[b, h + 1 :] = a
                    break
        return out, None


class RandomPlanner:
    """Uniform random action sequences, the baseline policy."""

    def __init__(self, H: int, T_o: int, S: int):
        self.H, self.T_o, self.S = H, T_o, S

    def __call__(self, s_hist, rng, envs=None, record=False):
        return rng.uniform(-1.0, 1.0, size=(len(s_hist), self.H, tasks.ACTION_DIM)), None


def _history(states: list[np.ndarray], T_o: int) -> np.ndarray:
    rows = states[-T_o:]
    if len(rows) < T_o:
        rows = [states[0]] * (T_o - len(rows)) + rows
    return np.stack(rows)


def run_episodes(
    planner,
    spec: TaskSpec,
    seeds,
    rng: np.random.Generator,
    T_a: int,
    gamma: float = 1.0,
    record: bool = False,
    first_episode_id: int = 0,
) -> list[Episode]:
    """Run one episode per seed in lockstep, replanning every ``T_a`` steps."""
    if T_a < 1:
        raise ValueError("T_a must be >= 1")
    envs: list[EnvState] = [tasks.reset(spec, seed) for seed in seeds]
    n = len(envs)
    S = planner.S
    states = [[pad_state(env.s, S)] for env in envs]
    actions: list[list[np.ndarray]] = [[] for _ in range(n)]
    rewards: list[list[float]] = [[] for _ in range(n)]
    segments: list[list[RolloutSegment]] = [[] for _ in range(n)]
    flags: list[list[bool]] = [[] for _ in range(n)]
    while not all(env.done for env in envs):
        live = [i for i in range(n) if not envs[i].done]
        s_hist = np.stack([_history(states[i], planner.T_o) for i in live])
        a_seq, traces = planner(s_hist, rng, envs=[envs[i] for i in live], record=record)
        for j, i in enumerate(live):
            seg_rewards = []
            t0 = envs[i].t
            for h in range(min(T_a, a_seq.shape[1])):
                if envs[i].done:
                    break
                a = np.clip(a_seq[j, h], -1.0, 1.0)
                envs[i], r, _, success = tasks.step(envs[i], a)
                flags[i].append(success)
                actions[i].append(a)
                rewards[i].append(r)
                states[i].append(pad_state(envs[i].s, S))
                seg_rewards.append(r)
            seg_reward = float(sum(gamma**h * r for h, r in enumerate(seg_rewards)))
            segments[i].append(
                RolloutSegment(
                    s_hist=s_hist[j],
                    trace=traces[j] if traces is not None else None,
                    seg_reward=seg_reward,
                    t=t0,
                    episode_id=first_episode_id + i,
                    rewards=seg_rewards,
                )
            )
    return [
        Episode(
            episode_id=first_episode_id + i,
            segments=segments[i],
            episode_return=float(sum(rewards[i])),
            success=envs[i].success,
            states=states[i],
            actions=actions[i],
            rewards=rewards[i],
            successes=flags[i],
        )
        for i in range(n)
    ]
