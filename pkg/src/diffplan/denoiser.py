"""Conditional noise-prediction MLP with a hand-written backward pass.

The network maps ``(a_k, s, k)`` to predicted noise with the shape of ``a_k``.
Inputs are the flattened noisy action sequence, the flattened state history
and a sinusoidal embedding of the diffusion step, concatenated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from diffplan.errors import DivergenceError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = "DIFFPLAN-CKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    H: int
    A: int
    T_o: int
    S: int
    E: int = 32
    hidden: tuple[int, ...] = (256, 256, 256)
    activation: str = "silu"

    def __post_init__(self):
        for name in ("H", "A", "T_o", "S", "E"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.E % 2:
            raise ValueError("time-embedding width E must be even")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.H * self.A + self.T_o * self.S + self.E

    @property
    def out_dim(self) -> int:
        return self.H * self.A

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.in_dim, *self.hidden, self.out_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class DenoiserParams:
    """Flat list ``[W1, b1, W2, b2, ...]`` plus the config that shaped it."""

    config: DenoiserConfig
    arrays: list[np.ndarray]

    def copy(self) -> DenoiserParams:
        return DenoiserParams(self.config, [a.copy() for a in self.arrays])

    def zeros_like(self) -> list[np.ndarray]:
        return [np.zeros_like(a) for a in self.arrays]

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays)


def _silu(x):
    # tanh form of the logistic avoids exp overflow for large |x|
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return x * sig, sig * (1.0 + x * (1.0 - sig))


def _tanh(x):
    y = np.tanh(x)
    return y, 1.0 - y * y


# each returns (activation, derivative)
_ACTIVATIONS = {"silu": _silu, "tanh": _tanh}


def init_params(config: DenoiserConfig, rng: np.random.Generator, zero_last: bool = True) -> DenoiserParams:
    """Uniform fan-in init; the output layer starts at zero unless ``zero_last`` is off."""
    arrays = []
    shapes = config.layer_shapes
    for i, (fan_in, fan_out) in enumerate(shapes):
        bound = 1.0 / math.sqrt(fan_in)
        if zero_last and i == len(shapes) - 1:
            W = np.zeros((fan_in, fan_out))
            b = np.zeros(fan_out)
        else:
            W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
        arrays += [W, b]
    return DenoiserParams(config, arrays)


def time_embedding(k: np.ndarray, E: int) -> np.ndarray:
    """Sinusoidal embedding with log-spaced frequencies, shape ``(len(k), E)``."""
    half = E // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(k, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _prepare(config: DenoiserConfig, a_k, s, k):
    a_k = np.asarray(a_k, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    single = a_k.ndim == 2
    if single:
        a_k, s = a_k[None], s[None]
    if a_k.shape[1:] != (config.H, config.A):
        raise ValueError(f"action sequence shape {a_k.shape[1:]} != ({config.H}, {config.A})")
    if s.shape[1:] != (config.T_o, config.S):
        raise ValueError(f"state history shape {s.shape[1:]} != ({config.T_o}, {config.S})")
    if s.shape[0] != a_k.shape[0]:
        raise ValueError("batch sizes of actions and states differ")
    B = a_k.shape[0]
    k = np.broadcast_to(np.asarray(k, dtype=np.int64), (B,))
    x = np.concatenate(
        [a_k.reshape(B, -1), s.reshape(B, -1), time_embedding(k, config.E)], axis=1
    )
    return x, single


def forward(params: DenoiserParams, a_k, s, k):
    """Batched forward pass returning ``(eps_pred, cache)``.

    ``a_k`` is ``(B, H, A)`` or ``(H, A)``; ``s`` matches with ``(T_o, S)``
    trailing dims; ``k`` is a scalar or length-``B`` integer array.
    """
    cfg = params.config
    x, single = _prepare(cfg, a_k, s, k)
    act = _ACTIVATIONS[cfg.activation]
    n_layers = len(params.arrays) // 2
    inputs, derivs = [], []
    h = x
    for i in range(n_layers):
        W, b = params.arrays[2 * i], params.arrays[2 * i + 1]
        inputs.append(h)
        z = h @ W + b
        if i < n_layers - 1:
            h, dh = act(z)
            derivs.append(dh)
        else:
            h = z
    out = h.reshape(-1, cfg.H, cfg.A)
    cache = (inputs, derivs, single)
    return (out[0] if single else out), cache


def backward(params: DenoiserParams, cache, grad_out: np.ndarray) -> list[np.ndarray]:
    """Parameter gradients given dLoss/d(eps_pred) with the forward output's shape."""
    inputs, derivs, single = cache
    g = np.asarray(grad_out, dtype=np.float64)
    g = g.reshape(1 if single else g.shape[0], -1)
    n_layers = len(params.arrays) // 2
    grads: list[np.ndarray] = [None] * (2 * n_layers)
    for i in reversed(range(n_layers)):
        W = params.arrays[2 * i]
        grads[2 * i] = inputs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i > 0:
            g = (g @ W.T) * derivs[i - 1]
    return grads


def predict_noise(params: DenoiserParams, a_k, s, k) -> np.ndarray:
    return forward(params, a_k, s, k)[0]


def loss_and_grad(params: DenoiserParams, a_k, s, k, target) -> tuple[float, list[np.ndarray]]:
    """Squared error summed over coordinates and averaged over the batch."""
    a_k = np.asarray(a_k, dtype=np.float64)
    if a_k.ndim != 3 or a_k.shape[0] == 0:
        raise ValueError("loss_and_grad needs a non-empty (B, H, A) batch")
    pred, cache = forward(params, a_k, s, k)
    diff = pred - target
    B = a_k.shape[0]
    loss = float(np.sum(diff * diff) / B)
    grads = backward(params, cache, 2.0 * diff / B)
    return loss, grads


def add_grads(a: list[np.ndarray], b: list[np.ndarray], scale: float = 1.0) -> list[np.ndarray]:
    return [x + scale * y for x, y in zip(a, b)]


def grad_norm(grads: list[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, params: DenoiserParams) -> AdamState:
        return cls(params.zeros_like(), params.zeros_like(), 0)


def adam_update(
    params: DenoiserParams,
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[DenoiserParams, AdamState]:
    """One Adam step with the usual defaults. Inputs are left untouched."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(grads) != len(params.arrays) or any(
        g.shape != p.shape for g, p in zip(grads, params.arrays)
    ):
        raise ValueError("gradient shapes do not match parameters")
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise DivergenceError("non-finite gradient; update rejected")
    t = state.step + 1
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    new_arrays, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.arrays, grads, state.m, state.v):
        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        new_arrays.append(p - update)
        new_m.append(m)
        new_v.append(v)
    new_params = DenoiserParams(params.config, new_arrays)
    if not new_params.all_finite():
        raise DivergenceError("parameters became non-finite")
    return new_params, AdamState(new_m, new_v, t)


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    """Network parameters plus the diffusion settings needed to sample."""

    params: DenoiserParams
    K: int
    schedule: str
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> DenoiserConfig:
        return self.params.config


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write a one-line text header followed by little-endian float64 params."""
    cfg = ckpt.config
    layers = ",".join(f"{i}x{o}" for i, o in cfg.layer_shapes)
    fields = {
        "version": CHECKPOINT_VERSION,
        "H": cfg.H,
        "A": cfg.A,
        "T_o": cfg.T_o,
        "S": cfg.S,
        "E": cfg.E,
        "K": ckpt.K,
        "schedule": ckpt.schedule,
        "activation": cfg.activation,
        "layers": layers,
    }
    header = CHECKPOINT_MAGIC + " " + " ".join(f"{k}={v}" for k, v in fields.items())
    for key, value in sorted(ckpt.meta.items()):
        header += f" meta.{key}={value}"
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + b"\n")
        for arr in ckpt.params.arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").strip()
        payload = fh.read()
    parts = header.split()
    if not parts or parts[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    kv = dict(p.split("=", 1) for p in parts[1:])
    if int(kv["version"]) != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {kv['version']}")
    shapes = [tuple(int(n) for n in layer.split("x")) for layer in kv["layers"].split(",")]
    hidden = tuple(o for _, o in shapes[:-1])
    cfg = DenoiserConfig(
        H=int(kv["H"]),
        A=int(kv["A"]),
        T_o=int(kv["T_o"]),
        S=int(kv["S"]),
        E=int(kv["E"]),
        hidden=hidden,
        activation=kv["activation"],
    )
    if cfg.layer_shapes != shapes:
        raise ValueError(f"{path}: layer shapes inconsistent with header dims")
    flat = np.frombuffer(payload, dtype="<f8")
    expected = sum(i * o + o for i, o in shapes)
    if flat.size != expected:
        raise ValueError(f"{path}: expected {expected} floats, found {flat.size}")
    arrays, pos = [], 0
    for i, o in shapes:
        arrays.append(flat[pos : pos + i * o].reshape(i, o).astype(np.float64))
        pos += i * o
        arrays.append(flat[pos : pos + o].astype(np.float64))
        pos += o
    meta = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
    return Checkpoint(DenoiserParams(cfg, arrays), int(kv["K"]), kv["schedule"], meta)
