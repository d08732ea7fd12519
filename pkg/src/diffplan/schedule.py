"""Noise schedules and sampler plans.

Diffusion steps are indexed ``k = 1..K``; ``k = 0`` is clean data.  Every
per-step array stores step ``k`` at slot ``k - 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    K: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    posterior_var: np.ndarray

    def __post_init__(self):
        for name in ("beta", "alpha", "alpha_bar", "sigma", "posterior_var"):
            arr = getattr(self, name)
            if arr.shape != (self.K,):
                raise ValueError(f"{name} must have shape ({self.K},), got {arr.shape}")
            arr.setflags(write=False)
        if not np.all((self.beta > 0) & (self.beta < 1)):
            raise ValueError("beta must lie strictly inside (0, 1)")
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")

    def alpha_bar_at(self, k: int | np.ndarray) -> float | np.ndarray:
        """Cumulative product at step ``k`` with the convention alpha_bar(0) = 1."""
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[k]


def transition_var(ab_t, ab_p):
    """Forward-posterior variance between cumulative levels ``ab_t`` < ``ab_p``.

    Both the schedule table and the eta=1 DDIM plan use this expression, so
    the full-length DDIM plan reproduces the table bit for bit.
    """
    return (1.0 - ab_t / ab_p) * (1.0 - ab_p) / (1.0 - ab_t)


def _from_betas(kind: str, beta: np.ndarray) -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = transition_var(alpha_bar, alpha_bar_prev)
    return NoiseSchedule(
        kind=kind,
        K=len(beta),
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        sigma=np.sqrt(beta),
        posterior_var=posterior_var,
    )


def cosine_alpha_bar(K: int, s: float = COSINE_OFFSET) -> np.ndarray:
    """Unclamped f(k)/f(0) for k = 0..K."""
    k = np.arange(K + 1, dtype=np.float64)
    f = np.cos(((k / K + s) / (1 + s)) * math.pi / 2) ** 2
    return f / f[0]


def build_schedule(
    kind: str = "cosine",
    K: int = 100,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
) -> NoiseSchedule:
    """Build a cosine or linear schedule with ``K`` steps.

    ``beta_start``/``beta_end`` only apply to the linear schedule.
    """
    if not isinstance(K, (int, np.integer)) or K < 1:
        raise ValueError(f"K must be a positive integer, got {K!r}")
    if kind == "cosine":
        ab = cosine_alpha_bar(K)
        beta = np.minimum(1.0 - ab[1:] / ab[:-1], MAX_BETA)
    elif kind == "linear":
        beta = np.linspace(beta_start, beta_end, K, dtype=np.float64)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return _from_betas(kind, beta)


@dataclass(frozen=True)
class StepCoefs:
    """Reverse-step coefficients for a set of steps (one entry per step or row).

    With ``x0 = (a - sqrt_1m_ab * eps) / sqrt_ab`` the predicted clean sample,
    the step mean is ``coef_a * a + coef_x0 * x0``, which expands to
    ``coef_x * a + coef_eps * eps``.  When ``clip_x0 > 0`` the coordinates of
    ``x0`` outside ``[-clip_x0, clip_x0]`` are clamped first; those coordinates
    no longer depend on ``eps``.
    """

    coef_x: np.ndarray
    coef_eps: np.ndarray
    coef_a: np.ndarray
    coef_x0: np.ndarray
    sqrt_ab: np.ndarray
    sqrt_1m_ab: np.ndarray
    clip_x0: float = 0.0

    def take(self, idx) -> StepCoefs:
        return StepCoefs(
            self.coef_x[idx],
            self.coef_eps[idx],
            self.coef_a[idx],
            self.coef_x0[idx],
            self.sqrt_ab[idx],
            self.sqrt_1m_ab[idx],
            self.clip_x0,
        )

    @staticmethod
    def concat(parts: list[StepCoefs]) -> StepCoefs:
        clips = {p.clip_x0 for p in parts}
        if len(clips) != 1:
            raise ValueError("cannot mix steps with different x0 clipping")
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
        return StepCoefs(
            cat("coef_x"), cat("coef_eps"), cat("coef_a"), cat("coef_x0"), cat("sqrt_ab"), cat("sqrt_1m_ab"),
            clips.pop(),
        )

    def mean(self, a: np.ndarray, eps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Step means and d(mean)/d(eps) for batched rows ``(N, ...)`` of ``a`` and ``eps``.

        Coefficient arrays must have length N (or be scalars for a single step).
        """
        shape = (-1,) + (1,) * (a.ndim - 1)
        col = lambda v: np.reshape(v, shape) if np.ndim(v) else v
        affine = col(self.coef_x) * a + col(self.coef_eps) * eps
        if self.clip_x0 <= 0:
            return affine, np.broadcast_to(col(self.coef_eps), a.shape)
        x0 = (a - col(self.sqrt_1m_ab) * eps) / col(self.sqrt_ab)
        inside = np.abs(x0) <= self.clip_x0
        clipped = col(self.coef_a) * a + col(self.coef_x0) * np.clip(x0, -self.clip_x0, self.clip_x0)
        # unclipped coordinates keep the affine form so both agree bitwise there
        mean = np.where(inside, affine, clipped)
        return mean, np.where(inside, col(self.coef_eps), 0.0)


@dataclass(frozen=True)
class SamplerPlan:
    """Per-step coefficients of a reverse sampler.

    Step ``i`` maps ``a^{k_cur[i]}`` to ``a^{k_prev[i]}`` with the mean given
    by ``coefs`` (see ``StepCoefs``) and isotropic variance ``var[i]``.
    """

    k_cur: np.ndarray
    k_prev: np.ndarray
    coefs: StepCoefs
    var: np.ndarray
    eta: float
    K: int

    def __len__(self):
        return len(self.k_cur)

    @property
    def coef_x(self) -> np.ndarray:
        return self.coefs.coef_x

    @property
    def coef_eps(self) -> np.ndarray:
        return self.coefs.coef_eps

    @property
    def clip_x0(self) -> float:
        return self.coefs.clip_x0

    @property
    def stochastic(self) -> bool:
        return bool(np.all(self.var > 0))


def ddim_indices(K: int, steps: int) -> np.ndarray:
    if steps == 1:
        return np.array([K])
    # floor(x + 0.5) keeps the sequence strictly decreasing when spacing >= 1
    return np.floor(np.linspace(K, 1, steps) + 0.5).astype(np.int64)


def ddim_subsequence(schedule: NoiseSchedule, steps: int, eta: float) -> SamplerPlan:
    """DDIM plan over an evenly spaced decreasing subsequence of 1..K."""
    K = schedule.K
    if not 1 <= steps <= K:
        raise ValueError(f"steps must be in [1, {K}], got {steps}")
    if eta < 0:
        raise ValueError(f"eta must be non-negative, got {eta}")
    k_cur = ddim_indices(K, steps)
    k_prev = np.append(k_cur[1:], 0)
    ab_t = schedule.alpha_bar_at(k_cur)
    ab_p = schedule.alpha_bar_at(k_prev)
    var = eta**2 * transition_var(ab_t, ab_p)
    coef_x = np.sqrt(ab_p / ab_t)
    dir_coef = np.sqrt(np.maximum(1 - ab_p - var, 0.0))
    coef_eps = dir_coef - np.sqrt(ab_p) * np.sqrt(1 - ab_t) / np.sqrt(ab_t)
    # x0 form: sqrt(ab_p) x0 + dir_coef * (a - sqrt(ab_t) x0) / sqrt(1 - ab_t)
    coef_a = dir_coef / np.sqrt(1 - ab_t)
    coef_x0 = np.sqrt(ab_p) - dir_coef * np.sqrt(ab_t) / np.sqrt(1 - ab_t)
    coefs = StepCoefs(coef_x, coef_eps, coef_a, coef_x0, np.sqrt(ab_t), np.sqrt(1 - ab_t))
    return SamplerPlan(k_cur, k_prev, coefs, var, float(eta), K)


def ancestral_plan(schedule: NoiseSchedule, variance: str = "sqrt_beta") -> SamplerPlan:
    """Full K-step ancestral sampler.

    ``variance="sqrt_beta"`` uses sigma_k^2 = beta_k; ``"posterior"`` uses the
    forward-posterior variance (identical to DDIM with eta=1 over all K steps).
    """
    K = schedule.K
    k_cur = np.arange(K, 0, -1)
    idx = k_cur - 1
    alpha = schedule.alpha[idx]
    ab = schedule.alpha_bar[idx]
    ab_p = schedule.alpha_bar_at(k_cur - 1)
    coef_x = 1.0 / np.sqrt(alpha)
    coef_eps = -(1.0 - alpha) / (np.sqrt(alpha) * np.sqrt(1.0 - ab))
    # forward-posterior mean in x0 form
    coef_a = np.sqrt(alpha) * (1.0 - ab_p) / (1.0 - ab)
    coef_x0 = np.sqrt(ab_p) * (1.0 - alpha) / (1.0 - ab)
    coefs = StepCoefs(coef_x, coef_eps, coef_a, coef_x0, np.sqrt(ab), np.sqrt(1.0 - ab))
    if variance == "sqrt_beta":
        var = schedule.beta[idx].copy()
    elif variance == "posterior":
        var = schedule.posterior_var[idx].copy()
    else:
        raise ValueError(f"unknown variance mode {variance!r}")
    return SamplerPlan(k_cur, k_cur - 1, coefs, var, 1.0, K)


def with_variance_floor(plan: SamplerPlan, min_std: float) -> SamplerPlan:
    """Return a copy of ``plan`` whose step variances are at least ``min_std**2``."""
    if min_std <= 0:
        return plan
    return replace(plan, var=np.maximum(plan.var, min_std**2))


def with_x0_clip(plan: SamplerPlan, clip: float) -> SamplerPlan:
    """Return a copy of ``plan`` that clamps the predicted clean sample to ``[-clip, clip]``.

    ``clip <= 0`` disables clamping.
    """
    if clip == plan.clip_x0:
        return plan
    return replace(plan, coefs=replace(plan.coefs, clip_x0=max(float(clip), 0.0)))
