"""Denoiser training: the noise-prediction objective and the Adam loop.

Every random quantity (timesteps, noise draws, batch order, init) comes
from seeds derived off one root, so a run is a pure function of its
arguments: same seed, same bytes out.
"""

from __future__ import annotations

import csv
from collections import deque
from pathlib import Path

import numpy as np

from .clustering import PoseAssignment
from .optim import AdamState, adam_step
from .rng import derive_seed, seeded_normal_array, seeded_permutation, seeded_uniform_ints
from .schedule import NoiseSchedule, forward_diffuse
from .tensor import Tensor, backward, tmean
from .unet import DenoiserCheckpoint, UNetConfig, denoiser_forward, init_params


def ddpm_loss(ckpt: DenoiserCheckpoint, x0: np.ndarray, p: np.ndarray,
              schedule: NoiseSchedule, seed: int,
              forward_fn=denoiser_forward) -> Tensor:
    """Mean squared error between predicted and actual noise.

    Per batch item a timestep is drawn uniformly and noise from a seeded
    normal; the noised image follows the closed-form forward process.
    Deterministic in (parameters, x0, p, seed).  ``forward_fn`` exists so
    tests can swap the denoiser for an oracle; it receives
    (ckpt, x_t, t, p) and must return the predicted noise.
    """
    x0 = np.asarray(x0)
    if x0.ndim != 4 or x0.shape[0] < 1:
        raise ValueError(f"x0 must be a nonempty (B, C, H, W) batch, got {x0.shape}")
    bsz = x0.shape[0]
    p = np.asarray(p)
    if p.shape != (bsz,):
        raise ValueError(f"pose labels must have shape ({bsz},), got {p.shape}")
    dtype = ckpt.params["in.conv.w"].dtype
    t = seeded_uniform_ints(bsz, 0, schedule.T, derive_seed(seed, "t"))
    eps = seeded_normal_array(x0.shape, derive_seed(seed, "eps"), dtype=np.float64)
    x_t = forward_diffuse(x0.astype(np.float64), t, eps, schedule)
    pred = forward_fn(ckpt, x_t.astype(dtype), t, p)
    if not isinstance(pred, Tensor):
        pred = Tensor(pred, dtype=dtype)
    diff = pred - Tensor(eps, dtype=dtype)
    return tmean(diff * diff)


def save_optimizer_state(state: AdamState, path) -> None:
    """Adam moments sidecar so an interrupted run can continue bit-exactly."""
    arrays = {"step": np.array(state.step, dtype=np.int64)}
    for name, m in state.m.items():
        arrays[f"m.{name}"] = m
        arrays[f"v.{name}"] = state.v[name]
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_optimizer_state(path, lr: float) -> AdamState:
    with np.load(path) as z:
        state = AdamState(lr=lr, step=int(z["step"]))
        for key in z.files:
            if key.startswith("m."):
                state.m[key[2:]] = z[key].astype(np.float64)
            elif key.startswith("v."):
                state.v[key[2:]] = z[key].astype(np.float64)
    return state


def _resolve_labels(images: dict[str, np.ndarray], poses: PoseAssignment,
                    pose_count: int) -> tuple[list[str], np.ndarray]:
    ids = sorted(images)
    missing = [i for i in ids if i not in poses.labels]
    if missing:
        raise ValueError(f"images without pose labels: {missing[:5]}"
                         + ("..." if len(missing) > 5 else ""))
    labels = np.array([poses.labels[i] for i in ids], dtype=np.int64)
    if labels.size and labels.max() >= pose_count:
        raise ValueError(
            f"pose label {labels.max()} out of range for pose_count {pose_count}")
    return ids, labels


def train(images: dict[str, np.ndarray], poses: PoseAssignment, config: UNetConfig,
          schedule: NoiseSchedule, iterations: int, *, batch_size: int = 64,
          lr: float = 2e-4, seed: int = 0, checkpoint_every: int = 0,
          out_dir: str | Path | None = None,
          log_path: str | Path | None = None,
          resume: tuple[DenoiserCheckpoint, AdamState] | None = None) -> DenoiserCheckpoint:
    """Minibatch Adam on ``ddpm_loss`` over a labeled image set.

    ``images`` maps image id to a (3, H, W) array in [-1, 1]; every id must
    carry a pose label.  Batches walk seeded per-epoch permutations.  When
    ``out_dir`` is set, a checkpoint is written every ``checkpoint_every``
    steps plus one at the end, each with an optimizer-state sidecar;
    ``log_path`` collects a "step,loss,smoothed" CSV where the smoothed
    column is the trailing 100-step mean (its window restarts on resume).
    A non-finite loss aborts with the offending step in the error.

    ``resume`` takes (checkpoint, optimizer state) from a previous run with
    the same seed and flags; batch order and per-step noise are indexed by
    absolute step, so the continuation is bit-identical to never stopping.
    ``iterations`` stays the total step count, not an increment.
    """
    if iterations < 0:
        raise ValueError("iterations must be nonnegative")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if not images:
        raise ValueError("no training images")
    ids, labels = _resolve_labels(images, poses, config.pose_count)
    size = config.image_size
    stack = np.stack([np.asarray(images[i], dtype=np.float32) for i in ids])
    if stack.shape[1:] != (3, size, size):
        raise ValueError(f"images are {stack.shape[1:]}, config wants (3, {size}, {size})")

    if resume is not None:
        prev, state = resume
        if prev.config != config:
            raise ValueError("resume checkpoint was trained with a different config")
        if prev.schedule.T != schedule.T or not np.array_equal(prev.schedule.beta, schedule.beta):
            raise ValueError("resume checkpoint uses a different noise schedule")
        if state.step != prev.step:
            raise ValueError(f"optimizer state is at step {state.step}, "
                             f"checkpoint at step {prev.step}")
        if prev.step > 0 and set(state.m) != set(prev.params):
            raise ValueError("optimizer state does not cover the checkpoint parameters")
        if prev.step > iterations:
            raise ValueError(f"checkpoint is already past step {iterations}")
        params = prev.params
        state.lr = lr
        start = prev.step
    else:
        params = init_params(config, seed)
        state = AdamState(lr=lr)
        start = 0
    n = len(ids)
    order = np.concatenate([
        seeded_permutation(n, derive_seed(seed, "perm", e))
        for e in range(max(1, -(-iterations * batch_size // n)))
    ])

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_file = open(log_path, "w", newline="") if log_path is not None else None
    writer = None
    if log_file is not None:
        writer = csv.writer(log_file)
        writer.writerow(["step", "loss", "smoothed"])

    window: deque[float] = deque(maxlen=100)
    ckpt = DenoiserCheckpoint(config, schedule, params, step=start)
    try:
        for step in range(start + 1, iterations + 1):
            take = order[(step - 1) * batch_size: step * batch_size]
            x0 = stack[take]
            p = labels[take]
            try:
                loss = ddpm_loss(ckpt, x0, p, schedule, derive_seed(seed, "step", step))
                value = loss.item()
            except FloatingPointError as exc:
                raise RuntimeError(f"non-finite loss at step {step}: {exc}") from exc
            if not np.isfinite(value):
                raise RuntimeError(f"non-finite loss at step {step}: {value}")
            window.append(value)
            if writer is not None:
                writer.writerow([step, f"{value:.6f}",
                                 f"{sum(window) / len(window):.6f}"])
            tape = backward(loss)
            params, state = adam_step(params, tape, state)
            ckpt = DenoiserCheckpoint(config, schedule, params, step=step)
            if out_dir is not None and checkpoint_every > 0 and step % checkpoint_every == 0:
                from .checkpoint import save_checkpoint
                save_checkpoint(ckpt, out_dir / f"checkpoint_{step:06d}.mrgc")
                save_optimizer_state(state, out_dir / f"checkpoint_{step:06d}.opt.npz")
        if out_dir is not None:
            from .checkpoint import save_checkpoint
            save_checkpoint(ckpt, out_dir / "checkpoint_final.mrgc")
            save_optimizer_state(state, out_dir / "checkpoint_final.opt.npz")
    finally:
        if log_file is not None:
            log_file.close()
    return ckpt
