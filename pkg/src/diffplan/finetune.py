"""Stage 2: per-task policy-gradient fine-tuning over the denoising chain.

Each planning call is treated as a short decision process whose actions are
the reverse-diffusion draws and whose only reward, on the final draw, is the
discounted return of the executed action prefix.  Updates use a clipped
importance-weighted surrogate plus an optional regularizer (behavior clone
on proficient episodes, KL to the pre-trained planner, or the plain
denoising loss on self-generated samples).
"""

from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from diffplan import denoiser
from diffplan.config import Config
from diffplan.denoiser import AdamState, Checkpoint, DenoiserParams, save_checkpoint
from diffplan.diffusion import DenoisingTrace, batch_logprob, bc_loss_batch, denoise_loss_batch
from diffplan.errors import BufferEmptyError, NotFinetunableError
from diffplan.rollout import DiffusionPlanner, Episode, RolloutSegment, run_episodes
from diffplan.schedule import NoiseSchedule, StepCoefs, build_schedule, ddim_subsequence, with_variance_floor, with_x0_clip
from diffplan.tasks import TaskSpec

log = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "episode",
    "env_steps",
    "mean_seg_reward",
    "episode_return",
    "rolling_success",
    "L_imp",
    "L_reg",
    "mean_rho",
    "clip_fraction",
]


# -- denoising-chain decision process -------------------------------------------


def mdp_rewards(segment: RolloutSegment) -> np.ndarray:
    """Per-step rewards of the denoising decision process for one trace.

    Zero everywhere except the final transition, which yields the segment reward.
    """
    rewards = np.zeros(len(segment.trace))
    rewards[-1] = segment.seg_reward
    return rewards


def mdp_transitions(segment: RolloutSegment):
    """Yield ``((s_hist, a_in), a_out, reward)`` for each denoising step."""
    rewards = mdp_rewards(segment)
    tr = segment.trace
    for i in range(len(tr)):
        yield (segment.s_hist, tr.a_in[i]), tr.a_out[i], rewards[i]


def discounted_sum(rewards, gamma: float) -> float:
    return float(sum(gamma**i * r for i, r in enumerate(rewards)))


# -- batched trace replay -------------------------------------------------------


@dataclass
class TraceBatch:
    """All denoising steps of a list of segments flattened into rows."""

    s: np.ndarray  # (N, T_o, S)
    k: np.ndarray  # (N,)
    a_in: np.ndarray  # (N, H, A)
    a_out: np.ndarray  # (N, H, A)
    coefs: StepCoefs  # (N,) per row
    var: np.ndarray  # (N,)
    logp_old: np.ndarray  # (N,)
    seg: np.ndarray  # (N,) index of the owning segment
    n_segments: int

    @classmethod
    def from_segments(cls, segments: list[RolloutSegment]) -> TraceBatch:
        if not segments:
            raise ValueError("empty segment batch")
        for seg in segments:
            _require_finetunable(seg.trace)
        n_steps = [len(seg.trace) for seg in segments]
        return cls(
            s=np.concatenate([np.repeat(seg.s_hist[None], n, axis=0) for seg, n in zip(segments, n_steps)]),
            k=np.concatenate([seg.trace.k for seg in segments]),
            a_in=np.concatenate([seg.trace.a_in for seg in segments]),
            a_out=np.concatenate([seg.trace.a_out for seg in segments]),
            coefs=StepCoefs.concat([seg.trace.coefs for seg in segments]),
            var=np.concatenate([seg.trace.var for seg in segments]),
            logp_old=np.concatenate([seg.trace.logp for seg in segments]),
            seg=np.repeat(np.arange(len(segments)), n_steps),
            n_segments=len(segments),
        )


def _require_finetunable(trace: DenoisingTrace) -> None:
    if trace is None:
        raise NotFinetunableError("segment has no recorded trace")
    if np.any(trace.var <= 0):
        raise NotFinetunableError("trace has zero-variance steps (deterministic sampler); log-densities undefined")


def step_means(params: DenoiserParams, batch: TraceBatch):
    """Reverse-step means under ``params`` for every row.

    Returns ``(mean, back)`` where ``back`` carries what the backward pass needs.
    """
    eps, cache = denoiser.forward(params, batch.a_in, batch.s, batch.k)
    mean, d_eps = batch.coefs.mean(batch.a_in, eps)
    return mean, (cache, d_eps)


def replay_logprob(params: DenoiserParams, batch: TraceBatch):
    mean, back = step_means(params, batch)
    return batch_logprob(batch.a_out, mean, batch.var), mean, back


def _mean_to_param_grads(params, back, d_mean: np.ndarray) -> list[np.ndarray]:
    cache, d_eps = back
    return denoiser.backward(params, cache, d_eps * d_mean)


def importance_ratio(params: DenoiserParams, params_old: DenoiserParams, trace: DenoisingTrace, s_hist) -> np.ndarray:
    """Per-step ratios p_theta / p_theta_old of the recorded draws, ordered like the trace.

    Both densities use the recorded variance and the current network's mean.
    """
    seg = RolloutSegment(s_hist=np.asarray(s_hist), trace=trace, seg_reward=0.0, t=0, episode_id=0)
    batch = TraceBatch.from_segments([seg])
    logp_new, _, _ = replay_logprob(params, batch)
    logp_old, _, _ = replay_logprob(params_old, batch)
    return np.exp(logp_new - logp_old)


@dataclass
class PGStats:
    mean_rho: float
    clip_fraction: float


def clipped_pg_loss(
    params: DenoiserParams,
    params_old: DenoiserParams | None,
    segments: list[RolloutSegment] | TraceBatch,
    r_hat,
    clip_eps: float,
    rho_override: np.ndarray | None = None,
) -> tuple[float, list[np.ndarray], PGStats]:
    """Clipped surrogate, summed over denoising steps and averaged over segments.

    ``loss = -mean_i sum_k min(rho_ik * r_i, clip(rho_ik, 1-eps, 1+eps) * r_i)``.
    When ``params_old`` is None the log-densities cached at sampling time are
    used as the old policy.  ``rho_override`` replaces the computed ratios
    (gradients are then taken as if rho had that value); it exists for
    exercising the clipping arithmetic.
    """
    batch = segments if isinstance(segments, TraceBatch) else TraceBatch.from_segments(segments)
    r_hat = np.asarray(r_hat, dtype=np.float64)
    if r_hat.shape != (batch.n_segments,):
        raise ValueError(f"need one transformed reward per segment, got shape {r_hat.shape}")
    logp, mean, back = replay_logprob(params, batch)
    if params_old is None:
        logp_old = batch.logp_old
    else:
        logp_old, _, _ = replay_logprob(params_old, batch)
    rho = np.exp(logp - logp_old) if rho_override is None else np.asarray(rho_override, dtype=np.float64)
    r = r_hat[batch.seg]
    unclipped = rho * r
    clipped = np.clip(rho, 1.0 - clip_eps, 1.0 + clip_eps) * r
    obj = np.minimum(unclipped, clipped)
    n = batch.n_segments
    loss = float(-np.sum(obj) / n)
    # gradient flows only where the unclipped branch is the active minimum
    active = unclipped <= clipped
    coef = np.where(active, -r * rho / n, 0.0)
    d_mean = coef[:, None, None] * (batch.a_out - mean) / batch.var[:, None, None]
    grads = _mean_to_param_grads(params, back, d_mean)
    stats = PGStats(
        mean_rho=float(np.mean(rho)),
        clip_fraction=float(np.mean(np.abs(rho - 1.0) > clip_eps)),
    )
    return loss, grads, stats


def reinforce_grad(params: DenoiserParams, segments: list[RolloutSegment], r_hat) -> list[np.ndarray]:
    """Gradient of ``-mean_i r_i * sum_k log p_theta(step ik)``, the plain score-function estimator."""
    batch = TraceBatch.from_segments(segments)
    mean, back = step_means(params, batch)
    r = np.asarray(r_hat, dtype=np.float64)[batch.seg]
    # d log N(x; m, v) / d m = (x - m) / v
    score = (batch.a_out - mean) / batch.var[:, None, None]
    d_mean = -(r / batch.n_segments)[:, None, None] * score
    return _mean_to_param_grads(params, back, d_mean)


# -- regularizers -----------------------------------------------------------------


def kl_loss(params: DenoiserParams, params_pre: DenoiserParams, batch: TraceBatch) -> tuple[float, list[np.ndarray]]:
    """Closed-form KL between current and pre-trained reverse steps sharing a variance."""
    mean, back = step_means(params, batch)
    mean_pre, _ = step_means(params_pre, batch)
    diff = mean - mean_pre
    n = batch.n_segments
    per_row = np.sum(diff.reshape(len(diff), -1) ** 2, axis=1) / (2.0 * batch.var)
    loss = float(np.sum(per_row) / n)
    d_mean = diff / batch.var[:, None, None] / n
    return loss, _mean_to_param_grads(params, back, d_mean)


def regularizer_loss(
    params: DenoiserParams,
    params_pre: DenoiserParams,
    kind: str,
    segments: list[RolloutSegment],
    target: TargetBuffer | None,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    batch_size: int = 256,
) -> tuple[float, list[np.ndarray]]:
    """Regularizer value and gradient for ``kind`` in {bc, none, kl, pl}."""
    if kind == "none":
        return 0.0, params.zeros_like()
    if kind == "bc":
        if target is None or len(target) == 0:
            raise BufferEmptyError("bc regularizer needs a non-empty target buffer")
        s, a0 = target.sample(batch_size, rng)
        return bc_loss_batch(params, s, a0, schedule, rng)
    if kind == "kl":
        return kl_loss(params, params_pre, TraceBatch.from_segments(segments))
    if kind == "pl":
        if not segments:
            raise ValueError("pl regularizer needs self-generated segments")
        idx = rng.integers(0, len(segments), size=batch_size)
        s = np.stack([segments[i].s_hist for i in idx])
        a0 = np.stack([segments[i].trace.a0 for i in idx])
        return denoise_loss_batch(params, s, a0, schedule, rng)
    raise ValueError(f"unknown regularizer {kind!r}")


# -- buffers and reward handling -------------------------------------------------------


@dataclass
class _StoredEpisode:
    score: float
    success: bool
    s_hist: np.ndarray
    a0: np.ndarray
    order: int


class TargetBuffer:
    """Whole proficient episodes as (state history, clean action sequence) records."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.episodes: list[_StoredEpisode] = []
        self._counter = 0

    def __len__(self):
        return sum(len(ep.a0) for ep in self.episodes)

    @property
    def n_episodes(self) -> int:
        return len(self.episodes)

    def admit(self, episode: Episode) -> None:
        self.episodes.append(
            _StoredEpisode(
                score=episode.episode_return,
                success=episode.success,
                s_hist=np.stack([seg.s_hist for seg in episode.segments]),
                a0=np.stack([seg.a0 for seg in episode.segments]),
                order=self._counter,
            )
        )
        self._counter += 1
        while len(self.episodes) > self.capacity:
            # lowest score goes first; ties evict the oldest
            worst = min(range(len(self.episodes)), key=lambda i: (self.episodes[i].score, self.episodes[i].order))
            self.episodes.pop(worst)

    def sample(self, batch_size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        if not self.episodes:
            raise BufferEmptyError("target buffer is empty")
        s = np.concatenate([ep.s_hist for ep in self.episodes])
        a0 = np.concatenate([ep.a0 for ep in self.episodes])
        idx = rng.integers(0, len(a0), size=batch_size)
        return s[idx], a0[idx]


class ProficiencyRule:
    """Success, or an episode return in the top quantile of recent episodes."""

    def __init__(self, quantile: float = 0.9, window: int = 100, min_history: int = 10):
        self.quantile = quantile
        self.history: deque[float] = deque(maxlen=window)
        self.min_history = min_history

    def observe(self, episode_return: float) -> None:
        self.history.append(episode_return)

    def __call__(self, episode: Episode) -> bool:
        if episode.success:
            return True
        if len(self.history) < self.min_history:
            return False
        return episode.episode_return >= float(np.quantile(np.asarray(self.history), self.quantile))


class RewardNormalizer:
    """Running standardization of segment rewards, clamped to [-clip, clip]."""

    def __init__(self, mode: str = "standardize", clip: float = 5.0):
        if mode not in ("standardize", "raw"):
            raise ValueError(f"unknown reward transform {mode!r}")
        self.mode = mode
        self.clip = clip
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    def update(self, values) -> None:
        for x in np.asarray(values, dtype=np.float64).ravel():
            self.count += 1
            delta = x - self.mean
            self.mean += delta / self.count
            self.m2 += delta * (x - self.mean)

    @property
    def std(self) -> float:
        if self.count < 2:
            return 1.0
        return max(math.sqrt(self.m2 / self.count), 1e-8)

    def __call__(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if self.mode == "raw":
            return values
        return np.clip((values - self.mean) / self.std, -self.clip, self.clip)


# -- the fine-tuning loop ----------------------------------------------------------------


@dataclass
class FinetuneResult:
    checkpoint: Checkpoint
    rows: list[dict] = field(default_factory=list)
    init_episodes: int = 0
    init_fallback: bool = False
    target_episodes: int = 0


def finetune_plan(schedule: NoiseSchedule, config: Config):
    dc = config.diffusion
    return with_x0_clip(with_variance_floor(ddim_subsequence(schedule, dc.ddim_steps, dc.eta), dc.min_std), dc.clip_x0)


def _clip_grads(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    if max_norm <= 0:
        return grads
    norm = denoiser.grad_norm(grads)
    if norm <= max_norm:
        return grads
    return [g * (max_norm / norm) for g in grads]


def finetune_task(
    ckpt: Checkpoint,
    spec: TaskSpec,
    config: Config,
    metrics_path=None,
    out_path=None,
) -> FinetuneResult:
    """Fine-tune a pre-trained checkpoint on one task.

    Rolls out proficient episodes with the pre-trained planner to seed both
    buffers, then alternates one collection round with ``p_step`` gradient
    steps until ``finetune.env_steps`` environment steps have been used.
    """
    fc = config.finetune
    T_a = config.env.T_a
    seeds = np.random.SeedSequence([fc.seed, 7919])
    reset_ss, sample_ss, loss_ss = seeds.spawn(3)
    reset_rng = np.random.default_rng(reset_ss)
    sample_rng = np.random.default_rng(sample_ss)
    loss_rng = np.random.default_rng(loss_ss)

    schedule = build_schedule(ckpt.schedule, ckpt.K)
    plan = finetune_plan(schedule, config)
    params_pre = ckpt.params.copy()
    params = ckpt.params.copy()
    planner = DiffusionPlanner(params, schedule, plan)
    adam = AdamState.fresh(params)
    lr = fc.lr
    lr_floor = fc.lr * fc.lr_floor_fraction

    target = TargetBuffer(fc.target_capacity)
    rule = ProficiencyRule(fc.proficiency_quantile, fc.proficiency_window, fc.proficiency_min_history)
    normalizer = RewardNormalizer(fc.reward_transform)
    recent_success: deque[bool] = deque(maxlen=fc.rolling_window)
    env_steps = 0
    episode_count = 0

    def collect(n: int) -> list[Episode]:
        nonlocal env_steps, episode_count
        ep_seeds = [int(x) for x in reset_rng.integers(0, 2**63 - 1, size=n)]
        eps = run_episodes(
            planner, spec, ep_seeds, sample_rng, T_a=T_a, gamma=fc.gamma, record=True,
            first_episode_id=episode_count,
        )
        episode_count += n
        env_steps += sum(ep.length for ep in eps)
        return eps

    # initialization: proficient episodes from the pre-trained planner
    replay: list[RolloutSegment] = []
    attempted: list[Episode] = []
    admitted_ids: set[int] = set()
    cap = fc.init_cap_factor * fc.n_init
    while len(admitted_ids) < fc.n_init and len(attempted) < cap:
        (ep,) = collect(1)
        attempted.append(ep)
        if rule(ep):
            target.admit(ep)
            replay.extend(ep.segments)
            admitted_ids.add(ep.episode_id)
        rule.observe(ep.episode_return)
    fallback = len(admitted_ids) < fc.n_init
    if fallback:
        log.warning(
            "%s: only %d/%d proficient episodes in %d attempts; admitting top returns",
            spec.task_id, len(admitted_ids), fc.n_init, len(attempted),
        )
        for ep in sorted(attempted, key=lambda e: -e.episode_return):
            if len(admitted_ids) >= fc.n_init:
                break
            if ep.episode_id not in admitted_ids:
                target.admit(ep)
                replay.extend(ep.segments)
                admitted_ids.add(ep.episode_id)
    for ep in attempted:
        recent_success.append(ep.success)

    fh = writer = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)

    rows: list[dict] = []
    round_idx = 0
    try:
        while env_steps < fc.env_steps:
            params_old = params
            eps = collect(fc.episodes_per_round)
            for ep in eps:
                if rule(ep):
                    target.admit(ep)
                rule.observe(ep.episode_return)
                recent_success.append(ep.success)
                replay.extend(ep.segments)
            segments = replay[-fc.replay_capacity :]
            replay = []
            seg_rewards = np.array([seg.seg_reward for seg in segments])
            normalizer.update(seg_rewards)
            r_hat = normalizer(seg_rewards)
            batch = TraceBatch.from_segments(segments)
            imp_vals, reg_vals, rhos, clips = [], [], [], []
            for _ in range(fc.p_step):
                if batch.n_segments > fc.batch_size:
                    pick = np.sort(loss_rng.choice(batch.n_segments, size=fc.batch_size, replace=False))
                    sub_segments = [segments[i] for i in pick]
                    sub = TraceBatch.from_segments(sub_segments)
                    sub_r = r_hat[pick]
                else:
                    sub_segments, sub, sub_r = segments, batch, r_hat
                l_imp, g_imp, stats = clipped_pg_loss(params, None, sub, sub_r, fc.clip_eps)
                grads = g_imp
                l_reg = 0.0
                if fc.regularizer != "none" and fc.lam > 0:
                    l_reg, g_reg = regularizer_loss(
                        params, params_pre, fc.regularizer, sub_segments, target, schedule, loss_rng, fc.batch_size
                    )
                    grads = denoiser.add_grads(g_imp, g_reg, fc.lam)
                grads = _clip_grads(grads, fc.max_grad_norm)
                params, adam = denoiser.adam_update(params, grads, adam, lr)
                imp_vals.append(l_imp)
                reg_vals.append(l_reg)
                rhos.append(stats.mean_rho)
                clips.append(stats.clip_fraction)
            planner.params = params
            lr = max(lr * fc.lr_decay, lr_floor)
            round_idx += 1
            row = {
                "episode": episode_count,
                "env_steps": env_steps,
                "mean_seg_reward": float(np.mean(seg_rewards)),
                "episode_return": float(np.mean([ep.episode_return for ep in eps])),
                "rolling_success": float(np.mean(recent_success)),
                "L_imp": float(np.mean(imp_vals)),
                "L_reg": float(np.mean(reg_vals)),
                "mean_rho": float(np.mean(rhos)),
                "clip_fraction": float(np.mean(clips)),
            }
            rows.append(row)
            if writer is not None:
                writer.writerow([row["episode"], row["env_steps"]] + [repr(row[c]) for c in METRIC_COLUMNS[2:]])
            if out_path is not None and fc.checkpoint_interval and round_idx % fc.checkpoint_interval == 0:
                save_checkpoint(out_path, _finetuned(params, ckpt, spec, fc, env_steps))
            del params_old
    finally:
        if fh is not None:
            fh.close()

    final = _finetuned(params, ckpt, spec, fc, env_steps)
    if out_path is not None:
        save_checkpoint(out_path, final)
    return FinetuneResult(final, rows, len(attempted), fallback, target.n_episodes)


def _finetuned(params, ckpt: Checkpoint, spec: TaskSpec, fc, env_steps: int) -> Checkpoint:
    meta = {
        "stage": "finetune",
        "task": spec.task_id,
        "regularizer": fc.regularizer,
        "env_steps": env_steps,
        "seed": fc.seed,
    }
    return Checkpoint(params, ckpt.K, ckpt.schedule, meta)
