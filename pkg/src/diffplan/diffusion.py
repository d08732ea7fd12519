"""Forward noising, reverse sampling and the denoising losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from diffplan import denoiser
from diffplan.denoiser import DenoiserParams
from diffplan.errors import BufferEmptyError
from diffplan.schedule import NoiseSchedule, SamplerPlan, StepCoefs

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class DenoisingTrace:
    """One planning call's reverse chain, ordered from a^K down to a^0.

    ``a_out[i]`` was drawn from ``Normal(mean[i], var[i] * I)``; ``logp[i]`` is
    that draw's log-density at sampling time.  ``a0`` is the clamped output.
    """

    k: np.ndarray
    coefs: StepCoefs
    a_in: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    a_out: np.ndarray
    logp: np.ndarray
    a0: np.ndarray

    def __len__(self):
        return len(self.k)


def forward_noise(a0, k, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form q(a^k | a^0). ``k`` may be a scalar or one value per batch row."""
    a0 = np.asarray(a0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if a0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} != data shape {a0.shape}")
    k = np.asarray(k)
    if np.any(k < 1) or np.any(k > schedule.K):
        raise ValueError(f"diffusion step out of range [1, {schedule.K}]")
    ab = schedule.alpha_bar[k - 1]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (a0.ndim - ab.ndim))
    return np.sqrt(ab) * a0 + np.sqrt(1.0 - ab) * eps


def reverse_step_mean(params: DenoiserParams, a_k, s, k: int, schedule: NoiseSchedule) -> np.ndarray:
    """Mean of the ancestral reverse kernel p(a^{k-1} | a^k, s)."""
    if not 1 <= k <= schedule.K:
        raise ValueError(f"diffusion step {k} out of range [1, {schedule.K}]")
    alpha = schedule.alpha[k - 1]
    ab = schedule.alpha_bar[k - 1]
    eps = denoiser.predict_noise(params, a_k, s, k)
    return (np.asarray(a_k) - (1.0 - alpha) / math.sqrt(1.0 - ab) * eps) / math.sqrt(alpha)


def gaussian_logprob(x, mean, var) -> float:
    """Log-density of an isotropic Gaussian, summed over all coordinates."""
    if np.any(np.asarray(var) <= 0):
        raise ValueError("variance must be positive")
    x = np.asarray(x, dtype=np.float64)
    d = x - mean
    return float(-0.5 * np.sum(d * d / var + np.log(var) + LOG_2PI))


def batch_logprob(x: np.ndarray, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    """Row-wise version of ``gaussian_logprob`` for ``(N, H, A)`` inputs and ``(N,)`` variances."""
    d = (x - mean).reshape(len(x), -1)
    D = d.shape[1]
    return -0.5 * (np.sum(d * d, axis=1) / var + D * (np.log(var) + LOG_2PI))


def sample_action_sequence(
    params: DenoiserParams,
    s,
    schedule: NoiseSchedule,
    plan: SamplerPlan,
    rng: np.random.Generator,
    record: bool = False,
):
    """Run the reverse chain from unit noise and return ``(a0, traces)``.

    ``s`` is a single ``(T_o, S)`` history or a batch ``(B, T_o, S)``.  The
    returned ``a0`` is clamped to [-1, 1]; trace log-densities refer to the
    pre-clamp draws.  ``traces`` is None unless ``record`` is set, and a list
    when ``s`` is batched.
    """
    if plan.K != schedule.K:
        raise ValueError("sampler plan was built for a different schedule")
    cfg = params.config
    s = np.asarray(s, dtype=np.float64)
    single = s.ndim == 2
    if single:
        s = s[None]
    B = s.shape[0]
    a = rng.standard_normal((B, cfg.H, cfg.A))
    n = len(plan)
    if record:
        a_in = np.empty((n, B, cfg.H, cfg.A))
        means = np.empty_like(a_in)
        a_out = np.empty_like(a_in)
        logp = np.empty((n, B))
    for i in range(n):
        k = int(plan.k_cur[i])
        eps = denoiser.predict_noise(params, a, s, k)
        mean, _ = plan.coefs.take(i).mean(a, eps)
        var = float(plan.var[i])
        if var > 0:
            nxt = mean + math.sqrt(var) * rng.standard_normal(a.shape)
        else:
            nxt = mean
        if record:
            a_in[i], means[i], a_out[i] = a, mean, nxt
            logp[i] = batch_logprob(nxt, mean, np.full(B, var)) if var > 0 else np.nan
        a = nxt
    a0 = np.clip(a, -1.0, 1.0)
    traces = None
    if record:
        traces = [
            DenoisingTrace(
                k=plan.k_cur.copy(),
                coefs=plan.coefs,
                a_in=a_in[:, b].copy(),
                mean=means[:, b].copy(),
                var=plan.var.copy(),
                a_out=a_out[:, b].copy(),
                logp=logp[:, b].copy(),
                a0=a0[b].copy(),
            )
            for b in range(B)
        ]
    if single:
        return a0[0], (traces[0] if record else None)
    return a0, traces


def denoise_loss_batch(
    params: DenoiserParams,
    s,
    a0,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> tuple[float, list[np.ndarray]]:
    """Noise-prediction loss on clean sequences with per-row (k, eps) draws."""
    a0 = np.asarray(a0, dtype=np.float64)
    if a0.ndim != 3 or a0.shape[0] == 0:
        raise ValueError("batch must be a non-empty (B, H, A) array")
    B = a0.shape[0]
    k = rng.integers(1, schedule.K + 1, size=B)
    eps = rng.standard_normal(a0.shape)
    a_k = forward_noise(a0, k, eps, schedule)
    return denoiser.loss_and_grad(params, a_k, s, k, eps)


def pretrain_loss_batch(params, s, a0, schedule, rng):
    """Pre-training loss on dataset windows."""
    return denoise_loss_batch(params, s, a0, schedule, rng)


def bc_loss_batch(params, s, a0, schedule, rng):
    """Behavior-clone loss on target-buffer samples, conditioned on their stored histories."""
    a0 = np.asarray(a0)
    if a0.size == 0:
        raise BufferEmptyError("target buffer is empty; seed it before fine-tuning")
    return denoise_loss_batch(params, s, a0, schedule, rng)
