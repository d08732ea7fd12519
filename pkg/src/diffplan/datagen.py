"""Sub-optimal multi-task dataset: generation, binary I/O and window sampling.

File layout: one ASCII header line, then ``n_records`` fixed-width records of
little-endian float64 values in this order::

    task_index, episode_id, t, s[S_max], a[A], r, s_next[S_max], done, success

States of tasks with fewer than ``S_max`` dims are zero-padded on the right.
A plain-text manifest (``<path>.manifest``) carries one line per task.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from diffplan import tasks
from diffplan.tasks import TaskSpec

log = logging.getLogger(__name__)

DATA_MAGIC = "DIFFPLAN-DATA"
DATA_VERSION = 1


@dataclass
class Dataset:
    task_ids: list[str]
    task_dims: list[int]
    S: int
    A: int
    task: np.ndarray
    episode: np.ndarray
    t: np.ndarray
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    success: np.ndarray

    def __len__(self):
        return len(self.task)

    @property
    def record_width(self) -> int:
        return 3 + self.S + self.A + 1 + self.S + 2

    def to_matrix(self) -> np.ndarray:
        cols = [
            self.task[:, None].astype(np.float64),
            self.episode[:, None].astype(np.float64),
            self.t[:, None].astype(np.float64),
            self.s,
            self.a,
            self.r[:, None],
            self.s_next,
            self.done[:, None].astype(np.float64),
            self.success[:, None].astype(np.float64),
        ]
        return np.concatenate(cols, axis=1)

    @classmethod
    def from_matrix(cls, task_ids, task_dims, S, A, m: np.ndarray) -> Dataset:
        c = 3
        s = m[:, c : c + S]
        c += S
        a = m[:, c : c + A]
        c += A
        r = m[:, c]
        c += 1
        s_next = m[:, c : c + S]
        c += S
        return cls(
            task_ids=list(task_ids),
            task_dims=list(task_dims),
            S=S,
            A=A,
            task=m[:, 0].astype(np.int64),
            episode=m[:, 1].astype(np.int64),
            t=m[:, 2].astype(np.int64),
            s=s.copy(),
            a=a.copy(),
            r=r.copy(),
            s_next=s_next.copy(),
            done=m[:, c].astype(bool),
            success=m[:, c + 1].astype(bool),
        )


def pad_state(s: np.ndarray, S: int) -> np.ndarray:
    out = np.zeros(S)
    out[: len(s)] = s
    return out


def run_controller_episode(spec: TaskSpec, seed, noise_level: float, rng: np.random.Generator):
    """Scripted controller mixed with uniform noise. Yields per-step tuples."""
    state = tasks.reset(spec, seed)
    steps = []
    while not state.done:
        a_ctrl = tasks.scripted_action(state)
        u = rng.uniform(-1.0, 1.0, size=spec.A)
        a = (1.0 - noise_level) * a_ctrl + noise_level * u
        nxt, r, done, success = tasks.step(state, a)
        steps.append((state.t, state.s, a, r, nxt.s, done, success))
        state = nxt
    return steps


def generate_dataset(
    suite: list[TaskSpec],
    episodes_per_task: int,
    noise_level: float,
    seed: int,
) -> tuple[Dataset, dict[str, dict]]:
    """Collect noisy-controller episodes for every task. Returns the data and per-task stats."""
    if not 0.0 <= noise_level <= 1.0:
        raise ValueError(f"noise_level must be in [0, 1], got {noise_level}")
    if episodes_per_task < 0:
        raise ValueError("episodes_per_task must be non-negative")
    S = max(spec.S for spec in suite)
    A = suite[0].A
    rows = []
    stats = {}
    episode_id = 0
    task_seeds = np.random.SeedSequence(seed).spawn(len(suite))
    for ti, (spec, ss) in enumerate(zip(suite, task_seeds)):
        reset_ss, noise_ss = ss.spawn(2)
        rng = np.random.default_rng(noise_ss)
        reset_seeds = reset_ss.generate_state(max(episodes_per_task, 1))
        successes, returns = [], []
        for ep in range(episodes_per_task):
            steps = run_controller_episode(spec, int(reset_seeds[ep]), noise_level, rng)
            ret = 0.0
            for t, s, a, r, s_next, done, success in steps:
                rows.append(
                    np.concatenate(
                        [[ti, episode_id, t], pad_state(s, S), a, [r], pad_state(s_next, S), [done, success]]
                    )
                )
                ret += r
            successes.append(steps[-1][6])
            returns.append(ret)
            episode_id += 1
        stats[spec.task_id] = {
            "episodes": episodes_per_task,
            "success_rate": float(np.mean(successes)) if successes else 0.0,
            "mean_return": float(np.mean(returns)) if returns else 0.0,
        }
        log.info("generated %s: %s", spec.task_id, stats[spec.task_id])
    width = 3 + S + A + 1 + S + 2
    matrix = np.array(rows).reshape(-1, width)
    data = Dataset.from_matrix([s.task_id for s in suite], [s.S for s in suite], S, A, matrix)
    return data, stats


def write_dataset(path, data: Dataset, stats: dict[str, dict] | None = None) -> None:
    path = Path(path)
    tasks_field = ",".join(f"{tid}:{d}" for tid, d in zip(data.task_ids, data.task_dims))
    header = (
        f"{DATA_MAGIC} version={DATA_VERSION} S={data.S} A={data.A} "
        f"n_records={len(data)} n_episodes={len(np.unique(data.episode))} tasks={tasks_field}"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + b"\n")
        fh.write(np.ascontiguousarray(data.to_matrix(), dtype="<f8").tobytes())
    if stats is not None:
        write_manifest(manifest_path(path), stats)


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest")


def write_manifest(path, stats: dict[str, dict]) -> None:
    with open(path, "w") as fh:
        for task_id, st in stats.items():
            fh.write(
                f"{task_id} episodes={st['episodes']} "
                f"success_rate={st['success_rate']:.6f} mean_return={st['mean_return']:.6f}\n"
            )


def read_manifest(path) -> dict[str, dict]:
    out = {}
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            kv = dict(p.split("=", 1) for p in parts[1:])
            out[parts[0]] = {
                "episodes": int(kv["episodes"]),
                "success_rate": float(kv["success_rate"]),
                "mean_return": float(kv["mean_return"]),
            }
    return out


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        payload = fh.read()
    if not header or header[0] != DATA_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    kv = dict(p.split("=", 1) for p in header[1:])
    if int(kv["version"]) != DATA_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {kv['version']}")
    S, A, n = int(kv["S"]), int(kv["A"]), int(kv["n_records"])
    task_ids, dims = [], []
    for item in kv["tasks"].split(","):
        tid, d = item.rsplit(":", 1)
        task_ids.append(tid)
        dims.append(int(d))
    width = 3 + S + A + 1 + S + 2
    flat = np.frombuffer(payload, dtype="<f8")
    if flat.size != n * width:
        raise ValueError(f"{path}: expected {n * width} floats, found {flat.size}")
    return Dataset.from_matrix(task_ids, dims, S, A, flat.reshape(n, width).astype(np.float64))


@dataclass
class WindowBatch:
    """Pre-training windows. Deliberately carries no reward field."""

    s_hist: np.ndarray  # (B, T_o, S)
    a_seq: np.ndarray  # (B, H, A)
    task: np.ndarray  # (B,)
    episode: np.ndarray  # (B,)
    t: np.ndarray  # (B,)


class WindowSampler:
    """Uniform (episode, t) sampler of (state history, action sequence) windows.

    Histories are left-padded with the episode's first state; action
    sequences are right-padded with the episode's last action.
    """

    def __init__(self, data: Dataset, H: int, T_o: int):
        if len(data) == 0:
            raise ValueError("dataset is empty")
        order = np.lexsort((data.t, data.episode))
        self.s = data.s[order]
        self.a = data.a[order]
        self.task = data.task[order]
        self.episode = data.episode[order]
        self.t = data.t[order]
        self.H, self.T_o = H, T_o
        n = len(self.s)
        boundary = np.flatnonzero(np.diff(self.episode)) + 1
        starts = np.concatenate([[0], boundary])
        ends = np.concatenate([boundary, [n]])
        lengths = ends - starts
        self.ep_start = np.repeat(starts, lengths)
        self.ep_end = np.repeat(ends, lengths)

    def __len__(self):
        return len(self.s)

    def windows(self, idx: np.ndarray) -> WindowBatch:
        idx = np.asarray(idx)
        hist = idx[:, None] + np.arange(-self.T_o + 1, 1)[None, :]
        hist = np.maximum(hist, self.ep_start[idx][:, None])
        fut = idx[:, None] + np.arange(self.H)[None, :]
        fut = np.minimum(fut, self.ep_end[idx][:, None] - 1)
        return WindowBatch(
            s_hist=self.s[hist],
            a_seq=self.a[fut],
            task=self.task[idx],
            episode=self.episode[idx],
            t=self.t[idx],
        )

    def sample(self, batch_size: int, rng: np.random.Generator) -> WindowBatch:
        return self.windows(rng.integers(0, len(self.s), size=batch_size))


def sample_windows(data: Dataset, batch_size: int, rng: np.random.Generator, H: int, T_o: int) -> WindowBatch:
    if len(data) == 0:
        raise ValueError("dataset is empty")
    return WindowSampler(data, H, T_o).sample(batch_size, rng)
