from __future__ import annotations

import numpy as np
import pytest

from diffplan import denoiser
from diffplan.denoiser import DenoiserConfig
from diffplan.schedule import build_schedule

SMALL = DenoiserConfig(H=4, A=2, T_o=2, S=3, E=8, hidden=(16, 16))


@pytest.fixture
def small_config():
    return SMALL


@pytest.fixture
def small_params():
    rng = np.random.default_rng(123)
    return denoiser.init_params(SMALL, rng, zero_last=False)


@pytest.fixture
def schedule():
    return build_schedule("cosine", 100)


def random_inputs(cfg: DenoiserConfig, B: int, rng: np.random.Generator, K: int = 100):
    a = rng.standard_normal((B, cfg.H, cfg.A))
    s = rng.standard_normal((B, cfg.T_o, cfg.S))
    k = rng.integers(1, K + 1, size=B)
    return a, s, k


def finite_difference_check(loss_fn, params, grads, rng, per_tensor: int = 6, delta: float = 1e-5):
    """Worst per-tensor relative error between ``grads`` and central differences.

    ``loss_fn(params)`` must be deterministic.  Entries are sampled per tensor;
    the error for a tensor is ||fd - g|| / max(||fd||, ||g||, 1e-10) over them.
    """
    worst = 0.0
    for ti, arr in enumerate(params.arrays):
        flat_idx = rng.choice(arr.size, size=min(per_tensor, arr.size), replace=False)
        fd, an = [], []
        for fi in flat_idx:
            idx = np.unravel_index(fi, arr.shape)
            plus = params.copy()
            minus = params.copy()
            plus.arrays[ti][idx] += delta
            minus.arrays[ti][idx] -= delta
            fd.append((loss_fn(plus) - loss_fn(minus)) / (2 * delta))
            an.append(grads[ti][idx])
        fd, an = np.array(fd), np.array(an)
        denom = max(np.linalg.norm(fd), np.linalg.norm(an), 1e-10)
        worst = max(worst, float(np.linalg.norm(fd - an) / denom))
    return worst


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
