"""Stage 1: fit the noise-prediction loss on the mixed multi-task dataset."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from diffplan import denoiser
from diffplan.config import Config
from diffplan.datagen import Dataset, WindowSampler
from diffplan.denoiser import AdamState, Checkpoint, DenoiserConfig, save_checkpoint
from diffplan.diffusion import pretrain_loss_batch
from diffplan.errors import DivergenceError
from diffplan.evaluate import evaluate
from diffplan.schedule import build_schedule
from diffplan.tasks import TaskSpec

log = logging.getLogger(__name__)


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    losses: list[float]
    log_rows: list[dict] = field(default_factory=list)


def denoiser_config(config: Config, S: int, A: int) -> DenoiserConfig:
    return DenoiserConfig(
        H=config.env.H,
        A=A,
        T_o=config.env.T_o,
        S=S,
        E=config.net.embed_dim,
        hidden=tuple(config.net.hidden),
        activation=config.net.activation,
    )


def initial_checkpoint(config: Config, S: int, A: int, seed: int) -> Checkpoint:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    params = denoiser.init_params(denoiser_config(config, S, A), rng)
    return Checkpoint(params, config.diffusion.K, config.diffusion.schedule)


def pretrain(
    config: Config,
    data: Dataset,
    suite: list[TaskSpec],
    out_path=None,
    metrics_path=None,
) -> PretrainResult:
    """Run ``pretrain.steps`` Adam updates on sampled windows.

    The metrics CSV gets one row per ``log_interval`` steps with the mean loss
    over that interval, plus per-task success rates on evaluation steps.
    """
    pc = config.pretrain
    seed = pc.seed
    ckpt = initial_checkpoint(config, data.S, data.A, seed)
    schedule = build_schedule(config.diffusion.schedule, config.diffusion.K)
    sampler = WindowSampler(data, config.env.H, config.env.T_o)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    params = ckpt.params
    adam = AdamState.fresh(params)
    cadence = max(1, math.ceil(pc.steps / 10)) if pc.steps else 0
    task_ids = [spec.task_id for spec in suite]

    fh = writer = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", *[f"success_{tid}" for tid in task_ids]])

    losses: list[float] = []
    rows: list[dict] = []
    window: list[float] = []
    try:
        for step in range(1, pc.steps + 1):
            batch = sampler.sample(pc.batch_size, rng)
            loss, grads = pretrain_loss_batch(params, batch.s_hist, batch.a_seq, schedule, rng)
            if not math.isfinite(loss):
                _dump_diverged(out_path, Checkpoint(params, ckpt.K, ckpt.schedule))
                raise DivergenceError(f"non-finite pre-train loss at step {step}")
            params, adam = denoiser.adam_update(params, grads, adam, pc.lr)
            losses.append(loss)
            window.append(loss)
            evaluating = pc.eval_interval and step % pc.eval_interval == 0
            if step % pc.log_interval == 0 or evaluating or step == pc.steps:
                row = {"step": step, "loss": float(np.mean(window))}
                window = []
                if evaluating:
                    current = Checkpoint(params, ckpt.K, ckpt.schedule)
                    for spec in suite:
                        res = evaluate(
                            current,
                            spec,
                            episodes=pc.eval_episodes,
                            seed=seed,
                            T_a=config.env.T_a,
                            ddim_steps=config.diffusion.ddim_steps,
                            eta=config.diffusion.eta,
                            min_std=config.diffusion.min_std,
                            clip_x0=config.diffusion.clip_x0,
                        )
                        row[f"success_{spec.task_id}"] = res.success_rate
                rows.append(row)
                log.info("pretrain step %d loss %.4f", step, row["loss"])
                if writer is not None:
                    writer.writerow(
                        [step, repr(row["loss"])]
                        + [repr(row[f"success_{t}"]) if f"success_{t}" in row else "" for t in task_ids]
                    )
            if out_path is not None and cadence and step % cadence == 0 and step != pc.steps:
                save_checkpoint(out_path, _stamp(Checkpoint(params, ckpt.K, ckpt.schedule), step, seed))
    finally:
        if fh is not None:
            fh.close()

    final = _stamp(Checkpoint(params, ckpt.K, ckpt.schedule), pc.steps, seed)
    if out_path is not None:
        save_checkpoint(out_path, final)
    return PretrainResult(final, losses, rows)


def _stamp(ckpt: Checkpoint, step: int, seed: int) -> Checkpoint:
    ckpt.meta = {"stage": "pretrain", "step": step, "seed": seed}
    return ckpt


def _dump_diverged(out_path, ckpt: Checkpoint) -> None:
    if out_path is None:
        return
    path = Path(out_path)
    snap = path.with_name(path.name + ".diverged")
    save_checkpoint(snap, ckpt)
    log.error("wrote diagnostic snapshot to %s", snap)


def smoothed(losses, window: int = 500) -> np.ndarray:
    """Trailing moving average used to compare early and late loss levels."""
    losses = np.asarray(losses, dtype=np.float64)
    if len(losses) == 0:
        return losses
    window = max(1, min(window, len(losses)))
    c = np.cumsum(np.concatenate([[0.0], losses]))
    return (c[window:] - c[:-window]) / window
