"""Success-rate evaluation, trajectory export and ablation summaries."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from diffplan.denoiser import Checkpoint
from diffplan.rollout import Episode, planner_from_checkpoint, run_episodes
from diffplan.tasks import TaskSpec

TRAJ_COLUMNS_PREFIX = ["episode", "t"]


@dataclass
class EvalResult:
    success_rate: float
    mean_return: float
    episodes: list[Episode]

    @property
    def successes(self) -> list[bool]:
        return [ep.success for ep in self.episodes]

    @property
    def returns(self) -> list[float]:
        return [ep.episode_return for ep in self.episodes]


def eval_seeds(seed: int, episodes: int) -> tuple[list[int], np.random.Generator]:
    reset_ss, sample_ss = np.random.SeedSequence(seed).spawn(2)
    return [int(x) for x in reset_ss.generate_state(episodes)], np.random.default_rng(sample_ss)


def evaluate_planner(planner, spec: TaskSpec, episodes: int, seed: int, T_a: int) -> EvalResult:
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    seeds, rng = eval_seeds(seed, episodes)
    eps = run_episodes(planner, spec, seeds, rng, T_a=T_a)
    success = float(np.mean([ep.success for ep in eps]))
    mean_return = float(np.mean([ep.episode_return for ep in eps]))
    return EvalResult(success, mean_return, eps)


def check_compatible(ckpt: Checkpoint, spec: TaskSpec) -> None:
    cfg = ckpt.config
    if cfg.A != spec.A:
        raise ValueError(f"checkpoint action dim {cfg.A} != task {spec.task_id!r} action dim {spec.A}")
    if cfg.S < spec.S:
        raise ValueError(f"checkpoint state dim {cfg.S} < task {spec.task_id!r} state dim {spec.S}")


def evaluate(
    ckpt: Checkpoint,
    spec: TaskSpec,
    episodes: int = 50,
    seed: int = 0,
    T_a: int = 8,
    ddim_steps: int = 10,
    eta: float = 1.0,
    min_std: float = 0.1,
    clip_x0: float = 1.0,
) -> EvalResult:
    """Receding-horizon evaluation of a checkpoint on one task. Never mutates ``ckpt``."""
    check_compatible(ckpt, spec)
    planner = planner_from_checkpoint(ckpt, ddim_steps, eta, min_std, clip_x0)
    return evaluate_planner(planner, spec, episodes, seed, T_a)


def traj_columns(S: int, A: int) -> list[str]:
    return (
        TRAJ_COLUMNS_PREFIX
        + [f"s{i}" for i in range(S)]
        + [f"a{i}" for i in range(A)]
        + ["reward", "success"]
    )


def export_trajectories(episodes: list[Episode], path, S: int, A: int) -> None:
    """CSV rows ``(episode, t, s..., a..., reward, success)``; one row per env step.

    ``s`` is the state the action was taken in; ``success`` is the latched
    flag after the step.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(traj_columns(S, A))
        for ep in episodes:
            for t, (a, r, latched) in enumerate(zip(ep.actions, ep.rewards, ep.successes)):
                s = ep.states[t]
                writer.writerow(
                    [ep.episode_id, t, *(repr(float(x)) for x in s[:S]), *(repr(float(x)) for x in a)]
                    + [repr(float(r)), int(latched)]
                )


def read_trajectories(path) -> dict[int, dict[str, np.ndarray]]:
    out: dict[int, dict[str, list]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        s_cols = [c for c in reader.fieldnames if c.startswith("s") and c[1:].isdigit()]
        a_cols = [c for c in reader.fieldnames if c.startswith("a") and c[1:].isdigit()]
        for row in reader:
            ep = out.setdefault(int(row["episode"]), {"t": [], "s": [], "a": [], "reward": [], "success": []})
            ep["t"].append(int(row["t"]))
            ep["s"].append([float(row[c]) for c in s_cols])
            ep["a"].append([float(row[c]) for c in a_cols])
            ep["reward"].append(float(row["reward"]))
            ep["success"].append(int(row["success"]))
    return {k: {name: np.array(v) for name, v in ep.items()} for k, ep in out.items()}


# -- ablation report -----------------------------------------------------------


def read_metrics(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _variant_name(path: Path, rows: list[dict[str, str]]) -> str:
    # metrics files are named <variant>[_seed<N>].csv; the seed suffix is dropped
    stem = path.stem
    if "_seed" in stem:
        stem = stem[: stem.rindex("_seed")]
    return stem


def ablation_report(paths, out_path=None, metric: str = "rolling_success") -> str:
    """Aligned text table of final ``metric`` per variant, mean and std across files.

    Files are grouped by name with any ``_seed<N>`` suffix removed.
    """
    paths = [Path(p) for p in paths]
    if not paths:
        raise ValueError("ablation_report needs at least one metrics file")
    groups: dict[str, list[float]] = {}
    for p in paths:
        rows = read_metrics(p)
        if not rows:
            raise ValueError(f"{p}: no metric rows")
        if metric not in rows[-1]:
            raise ValueError(f"{p}: column {metric!r} missing")
        groups.setdefault(_variant_name(p, rows), []).append(float(rows[-1][metric]))
    header = ("variant", "n", f"final_{metric}_mean", "std")
    body = [
        (name, str(len(vals)), f"{np.mean(vals):.4f}", f"{np.std(vals):.4f}")
        for name, vals in groups.items()
    ]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in [header, *body]]
    text = "\n".join(lines) + "\n"
    if out_path is not None:
        Path(out_path).write_text(text)
    return text
