"""Deterministic DDIM sampling, inversion, and guided multi-view generation.

The sampler iterates the closed-form update

    x_prev = sqrt(ab_prev) * x0_hat + sqrt(1 - ab_prev) * eps_pred,
    x0_hat = (x_t - sqrt(1 - ab_t) * eps_pred) / sqrt(ab_t)

over a strictly increasing timestep subsequence, visited top-down when
sampling and bottom-up when inverting an image back to its noise.  Because
the update is deterministic, inversion followed by sampling approximately
round-trips an image, and the keys/values recorded along the reference
trajectory can steer other trajectories: target views attend to the
reference's K/V (cross-frame attention), optionally sharpened by combining
a softmax and an argmax prediction into one guided noise estimate.

All trajectory math runs in float64; the network is consulted in its own
parameter dtype.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .rng import derive_seed, seeded_normal_array
from .schedule import NoiseSchedule
from .tensor import Tensor, no_grad
from .unet import DenoiserCheckpoint, cfa_layer_names, denoiser_forward

GAMMA_MAX = 4.0
GAMMA_WARN = 2.5


@dataclass
class SamplerConfig:
    """Knobs for DDIM trajectories and guidance.

    ``timestep_subsequence`` overrides the default uniform spread over
    [0, T); ``gamma`` is the guidance strength (1 disables guidance, values
    are clamped to [0, 4] and warned about above 2.5, where outputs visibly
    degrade); ``share_initial_noise`` starts every target view from the
    reference's initial noise.
    """

    steps: int = 50
    gamma: float = 1.5
    timestep_subsequence: tuple[int, ...] | None = None
    share_initial_noise: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.gamma > GAMMA_WARN:
            warnings.warn(f"gamma {self.gamma} > {GAMMA_WARN} tends to produce "
                          "unrealistic images", stacklevel=2)
        if self.gamma > GAMMA_MAX:
            self.gamma = GAMMA_MAX
        if self.timestep_subsequence is not None:
            seq = tuple(int(t) for t in self.timestep_subsequence)
            if not seq or any(b <= a for a, b in zip(seq, seq[1:])):
                raise ValueError("timestep_subsequence must be nonempty and "
                                 "strictly increasing")
            if seq[0] < 0:
                raise ValueError("timestep_subsequence has negative entries")
            self.timestep_subsequence = seq

    def resolve_subsequence(self, T: int) -> np.ndarray:
        """The increasing timestep indices this config visits for a given T."""
        if self.timestep_subsequence is not None:
            seq = np.asarray(self.timestep_subsequence, dtype=np.int64)
            if seq[-1] >= T:
                raise ValueError(f"timestep_subsequence exceeds T={T}")
            return seq
        if self.steps > T:
            raise ValueError(f"steps {self.steps} > schedule length {T}")
        return np.unique(np.round(np.linspace(0, T - 1, self.steps)).astype(np.int64))


@dataclass
class ReferenceKV:
    """Keys/values recorded from a reference trajectory.

    ``by_timestep[t][layer]`` is an (n, d) K / V pair for every retained
    timestep and every bottleneck/decoder attention layer.
    """

    by_timestep: dict[int, dict[str, tuple[np.ndarray, np.ndarray]]] = field(
        default_factory=dict, repr=False)

    def at(self, t: int) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        if t not in self.by_timestep:
            raise ValueError(f"no reference K/V recorded for timestep {t}")
        return self.by_timestep[t]

    def validate(self, ckpt: DenoiserCheckpoint, subsequence: np.ndarray) -> None:
        layers = set(cfa_layer_names(ckpt.config))
        for t in subsequence:
            got = set(self.at(int(t)))
            if got != layers:
                raise ValueError(
                    f"reference K/V at t={int(t)} covers layers {sorted(got)}, "
                    f"expected {sorted(layers)}")


@dataclass
class ViewRequest:
    """One reference (an image to invert, or a starting noise) plus the pose
    labels to synthesize.  The reference pose must already be resolved; for
    image references the caller infers it from the image's descriptor."""

    targets: tuple[int, ...]
    reference_pose: int
    reference_image: np.ndarray | None = None
    reference_noise: np.ndarray | None = None

    def __post_init__(self):
        self.targets = tuple(int(p) for p in self.targets)
        if (self.reference_image is None) == (self.reference_noise is None):
            raise ValueError("exactly one of reference_image / reference_noise "
                             "must be given")

    def validate(self, pose_count: int) -> None:
        labels = self.targets + (self.reference_pose,)
        if any(p < 0 or p >= pose_count for p in labels):
            raise ValueError(f"pose label out of range [0, {pose_count})")


# ------------------------------------------------------------ attention math

def _check_qkv(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> None:
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("attention operands must be 2-D (rows, dim)")
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"query dim {q.shape[1]} != key dim {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"key rows {k.shape[0]} != value rows {v.shape[0]}")
    if q.shape[0] < 1 or k.shape[0] < 1:
        raise ValueError("attention needs at least one query and one key")


def cross_frame_attention(q: np.ndarray, k_ref: np.ndarray,
                          v_ref: np.ndarray) -> np.ndarray:
    """Softmax attention of queries over reference keys/values."""
    q, k_ref, v_ref = np.asarray(q), np.asarray(k_ref), np.asarray(v_ref)
    _check_qkv(q, k_ref, v_ref)
    logits = q @ k_ref.T / np.sqrt(q.shape[1])
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights @ v_ref


def hard_attention(q: np.ndarray, k_ref: np.ndarray, v_ref: np.ndarray) -> np.ndarray:
    """Winner-take-all attention: each query copies the value of its best
    key (ties go to the lowest key index)."""
    q, k_ref, v_ref = np.asarray(q), np.asarray(k_ref), np.asarray(v_ref)
    _check_qkv(q, k_ref, v_ref)
    logits = q @ k_ref.T / np.sqrt(q.shape[1])
    return v_ref[np.argmax(logits, axis=1)]


def hag_combine(eps_soft: np.ndarray, eps_hard: np.ndarray, gamma: float) -> np.ndarray:
    """Guided noise estimate (1 - gamma) * hard + gamma * soft.

    gamma=1 returns ``eps_soft`` untouched so guidance-off runs are
    bit-identical to plain cross-frame attention.
    """
    eps_soft = np.asarray(eps_soft)
    eps_hard = np.asarray(eps_hard)
    if eps_soft.shape != eps_hard.shape:
        raise ValueError(f"shape mismatch {eps_soft.shape} vs {eps_hard.shape}")
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    if gamma == 1.0:
        return eps_soft
    return (1.0 - gamma) * eps_hard + gamma * eps_soft


# ------------------------------------------------------------- DDIM updates

def _transport(x: np.ndarray, eps: np.ndarray, ab_from: float, ab_to: float) -> np.ndarray:
    x0_hat = (x - np.sqrt(1.0 - ab_from) * eps) / np.sqrt(ab_from)
    return np.sqrt(ab_to) * x0_hat + np.sqrt(1.0 - ab_to) * eps


def _alpha_bar(schedule: NoiseSchedule, t: int) -> float:
    if t == -1:
        return 1.0
    if t < 0 or t >= schedule.T:
        raise ValueError(f"timestep {t} out of range [0, {schedule.T})")
    return float(schedule.alpha_bar[t])


def ddim_step(x_t: np.ndarray, eps_pred: np.ndarray, t: int, t_prev: int,
              schedule: NoiseSchedule) -> np.ndarray:
    """One deterministic denoising step from t down to t_prev (-1 means the
    final step onto the clean-image estimate)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps = np.asarray(eps_pred, dtype=np.float64)
    if x_t.shape != eps.shape:
        raise ValueError(f"x_t shape {x_t.shape} != eps shape {eps.shape}")
    ab_t = _alpha_bar(schedule, int(t))
    if int(t) == -1:
        raise ValueError("t must index the schedule, not -1")
    ab_prev = _alpha_bar(schedule, int(t_prev))
    if t_prev != -1 and int(t_prev) >= int(t):
        raise ValueError(f"ddim_step runs downward: t_prev {t_prev} >= t {t}")
    return _transport(x_t, eps, ab_t, ab_prev)


def ddim_invert_step(x_t: np.ndarray, eps_pred: np.ndarray, t: int, t_next: int,
                     schedule: NoiseSchedule) -> np.ndarray:
    """Algebraic inverse of :func:`ddim_step`: transport from t (or -1 for a
    clean image) up to t_next."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps = np.asarray(eps_pred, dtype=np.float64)
    if x_t.shape != eps.shape:
        raise ValueError(f"x_t shape {x_t.shape} != eps shape {eps.shape}")
    ab_t = _alpha_bar(schedule, int(t))
    ab_next = _alpha_bar(schedule, int(t_next))
    if int(t_next) == -1 or (t != -1 and int(t_next) <= int(t)):
        raise ValueError(f"ddim_invert_step runs upward: t_next {t_next} <= t {t}")
    return _transport(x_t, eps, ab_t, ab_next)


# -------------------------------------------------------------- trajectories

def _predict(forward_fn, ckpt, x: np.ndarray, t: int, pose: int,
             mode: str, kv: dict | None) -> np.ndarray:
    with no_grad():
        out = forward_fn(ckpt, x[None], t, pose, mode, kv)
    if isinstance(out, Tensor):
        out = out.data
    return np.asarray(out, dtype=np.float64)[0]


def ddim_sample(ckpt: DenoiserCheckpoint, noise: np.ndarray, pose: int,
                config: SamplerConfig, attn_mode: str = "standard",
                reference_kv: ReferenceKV | None = None,
                forward_fn=denoiser_forward):
    """Run the full denoising trajectory from ``noise`` to an image.

    attn_mode "standard" returns the image; "record_kv" returns
    (image, ReferenceKV) with the trajectory's bottleneck/decoder K/V;
    "use_reference_kv" consumes ``reference_kv`` and, when config.gamma is
    not 1, blends softmax and argmax reference attention into the guided
    noise estimate at every step.  ``forward_fn`` may replace the network
    (oracle denoisers in tests).
    """
    noise = np.asarray(noise, dtype=np.float64)
    size = ckpt.config.image_size
    if noise.shape != (3, size, size):
        raise ValueError(f"noise shape {noise.shape} != (3, {size}, {size})")
    seq = config.resolve_subsequence(ckpt.schedule.T)
    recorded = ReferenceKV() if attn_mode == "record_kv" else None
    if attn_mode in ("use_reference_kv", "use_reference_kv_hard"):
        if reference_kv is None:
            raise ValueError(f"attn_mode {attn_mode!r} requires reference_kv")
        reference_kv.validate(ckpt, seq)

    x = noise
    for i in range(len(seq) - 1, -1, -1):
        t = int(seq[i])
        t_prev = int(seq[i - 1]) if i > 0 else -1
        if attn_mode == "standard":
            eps = _predict(forward_fn, ckpt, x, t, pose, "standard", None)
        elif attn_mode == "record_kv":
            kv: dict = {}
            eps = _predict(forward_fn, ckpt, x, t, pose, "record_kv", kv)
            recorded.by_timestep[t] = kv
        else:
            kv = reference_kv.at(t)
            eps = _predict(forward_fn, ckpt, x, t, pose, attn_mode, kv)
            if attn_mode == "use_reference_kv" and config.gamma != 1.0:
                eps_hard = _predict(forward_fn, ckpt, x, t, pose,
                                    "use_reference_kv_hard", kv)
                eps = hag_combine(eps, eps_hard, config.gamma)
        x = ddim_step(x, eps, t, t_prev, ckpt.schedule)

    image = x.astype(np.float32)
    return (image, recorded) if attn_mode == "record_kv" else image


def ddim_invert(ckpt: DenoiserCheckpoint, image: np.ndarray, pose: int,
                config: SamplerConfig,
                forward_fn=denoiser_forward) -> tuple[np.ndarray, ReferenceKV]:
    """Walk the trajectory upward from an image to its generating noise.

    Uses the standard first-order approximation (the noise prediction at
    the current point stands in for the next one) and records every
    bottleneck/decoder K/V along the way, including one extra evaluation at
    the top timestep so the recording covers the whole subsequence.
    """
    image = np.asarray(image, dtype=np.float64)
    size = ckpt.config.image_size
    if image.shape != (3, size, size):
        raise ValueError(f"image shape {image.shape} != (3, {size}, {size})")
    seq = config.resolve_subsequence(ckpt.schedule.T)

    recorded = ReferenceKV()
    x = image
    prev_t = -1
    for t in (int(s) for s in seq):
        kv: dict = {}
        eval_t = t if prev_t == -1 else prev_t
        eps = _predict(forward_fn, ckpt, x, eval_t, pose, "record_kv", kv)
        recorded.by_timestep[eval_t] = kv
        x = ddim_invert_step(x, eps, prev_t, t, ckpt.schedule)
        prev_t = t
    kv = {}
    _predict(forward_fn, ckpt, x, prev_t, pose, "record_kv", kv)
    recorded.by_timestep[prev_t] = kv
    return x, recorded


def generate_novel_views(ckpt: DenoiserCheckpoint, request: ViewRequest,
                         config: SamplerConfig, seed: int = 0,
                         forward_fn=denoiser_forward) -> list[np.ndarray]:
    """Produce one image per requested pose, all tied to one reference.

    The reference trajectory (inverted from an image, or sampled from the
    given noise while recording) supplies per-step keys/values; each target
    is then generated independently with reference attention and guidance,
    so any subset or ordering of targets yields the same per-pose images.
    ``seed`` only matters when ``config.share_initial_noise`` is off, where
    it derives one starting noise per target pose.
    """
    request.validate(ckpt.config.pose_count)
    size = ckpt.config.image_size
    if request.reference_image is not None:
        start, ref_kv = ddim_invert(ckpt, request.reference_image,
                                    request.reference_pose, config,
                                    forward_fn=forward_fn)
    else:
        start = np.asarray(request.reference_noise, dtype=np.float64)
        _, ref_kv = ddim_sample(ckpt, start, request.reference_pose, config,
                                attn_mode="record_kv", forward_fn=forward_fn)

    views = []
    for pose in request.targets:
        if config.share_initial_noise:
            noise = start
        else:
            noise = seeded_normal_array((3, size, size),
                                        derive_seed(seed, "target", pose),
                                        dtype=np.float64)
        views.append(ddim_sample(ckpt, noise, pose, config,
                                 attn_mode="use_reference_kv",
                                 reference_kv=ref_kv, forward_fn=forward_fn))
    return views
