"""Pose-conditioned U-Net noise predictor.

The denoiser maps a noised image, a diffusion timestep, and a pose label to
a predicted noise field of the same shape.  Timesteps enter through a
sinusoidal embedding followed by a two-layer MLP; the pose label adds a
learnable row on top of that embedding.  Each residual block injects the
combined embedding as a per-channel scale and shift applied right after its
second group normalization, so conditioning modulates feature statistics
rather than being concatenated.

Attention layers are single-head self-attention over flattened spatial
positions.  Encoder attention always runs plain self-attention; the
bottleneck and decoder attention layers additionally support recording
their keys/values or replacing them with externally supplied reference
keys/values (softly via softmax, or hard via argmax row selection), which
is what ties separately generated views of one object together.

Parameters live in a flat name -> Tensor dict whose exact names and shapes
are a pure function of :class:`UNetConfig`; ``param_spec`` is the single
source of truth used by initialization and checkpoint validation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import derive_seed, seeded_normal_array
from .schedule import NoiseSchedule
from .tensor import (
    Tensor,
    concat,
    conv2d,
    embedding,
    group_norm,
    matmul,
    nearest_upsample,
    reshape,
    silu,
    softmax_rows,
    transpose,
)

IMG_CHANNELS = 3

ATTN_MODES = ("standard", "record_kv", "use_reference_kv", "use_reference_kv_hard")


@dataclass(frozen=True)
class UNetConfig:
    """Architecture hyperparameters; every derived shape follows from these."""

    image_size: int = 32
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 2)
    res_blocks_per_level: int = 2
    attention_levels: frozenset[int] = frozenset((16, 8))
    groupnorm_groups: int = 8
    embed_dim: int = 128
    pose_count: int = 8

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers",
                           tuple(int(m) for m in self.channel_multipliers))
        object.__setattr__(self, "attention_levels",
                           frozenset(int(r) for r in self.attention_levels))
        self.validate()

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    def resolution(self, level: int) -> int:
        return self.image_size >> level

    def validate(self) -> None:
        if not self.channel_multipliers:
            raise ValueError("channel_multipliers must be nonempty")
        if any(m < 1 for m in self.channel_multipliers):
            raise ValueError("channel multipliers must be positive")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if self.res_blocks_per_level < 1:
            raise ValueError("res_blocks_per_level must be positive")
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ValueError("embed_dim must be even and >= 2")
        if self.pose_count < 1:
            raise ValueError("pose_count must be positive")
        if self.groupnorm_groups < 1:
            raise ValueError("groupnorm_groups must be positive")
        down = 1 << (self.levels - 1)
        if self.image_size % down or self.image_size // down < 1:
            raise ValueError(
                f"image_size {self.image_size} not divisible into {self.levels} levels")
        reachable = {self.resolution(i) for i in range(self.levels)}
        stray = self.attention_levels - reachable
        if stray:
            raise ValueError(f"attention_levels {sorted(stray)} not among "
                             f"level resolutions {sorted(reachable)}")
        # Walking the layout checks group divisibility at every norm site.
        param_spec(self)

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "base_channels": self.base_channels,
            "channel_multipliers": list(self.channel_multipliers),
            "res_blocks_per_level": self.res_blocks_per_level,
            "attention_levels": sorted(self.attention_levels),
            "groupnorm_groups": self.groupnorm_groups,
            "embed_dim": self.embed_dim,
            "pose_count": self.pose_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(
            image_size=int(d["image_size"]),
            base_channels=int(d["base_channels"]),
            channel_multipliers=tuple(d["channel_multipliers"]),
            res_blocks_per_level=int(d["res_blocks_per_level"]),
            attention_levels=frozenset(d["attention_levels"]),
            groupnorm_groups=int(d["groupnorm_groups"]),
            embed_dim=int(d["embed_dim"]),
            pose_count=int(d["pose_count"]),
        )


# --------------------------------------------------------------------- layout

def _walk(config: UNetConfig):
    """Yield (name, shape, kind) for every parameter, in forward order.

    kind selects the initializer: "conv" / "linear" scaled normal, "zero",
    "one", "table" (pose rows), "out" (zero-initialized final conv).
    """
    groups = config.groupnorm_groups
    dim = config.embed_dim
    rb = config.res_blocks_per_level
    base = config.base_channels
    mults = config.channel_multipliers

    def norm(prefix, c):
        if c % groups:
            raise ValueError(
                f"groupnorm_groups {groups} does not divide {c} channels at {prefix}")
        yield f"{prefix}.scale", (c,), "one"
        yield f"{prefix}.shift", (c,), "zero"

    def linear(prefix, fin, fout):
        yield f"{prefix}.w", (fin, fout), "linear"
        yield f"{prefix}.b", (fout,), "zero"

    def conv(prefix, cout, cin, k, kind="conv"):
        yield f"{prefix}.w", (cout, cin, k, k), kind
        yield f"{prefix}.b", (cout,), "zero" if kind == "conv" else "out"

    def res_block(prefix, cin, cout):
        yield from norm(f"{prefix}norm1", cin)
        yield from conv(f"{prefix}conv1", cout, cin, 3)
        yield from linear(f"{prefix}emb_scale", dim, cout)
        yield from linear(f"{prefix}emb_shift", dim, cout)
        yield from conv(f"{prefix}conv2", cout, cout, 3)
        if cin != cout:
            yield f"{prefix}skip.w", (cout, cin, 1, 1), "conv"

    def attention(prefix, c):
        yield from norm(f"{prefix}norm", c)
        for head in ("q", "k", "v", "o"):
            yield from linear(f"{prefix}{head}", c, c)

    yield from linear("time.mlp1", dim, dim)
    yield from linear("time.mlp2", dim, dim)
    yield "pose.table", (config.pose_count, dim), "table"
    yield from conv("in.conv", base, IMG_CHANNELS, 3)

    skips = [base]
    ch = base
    for i, mult in enumerate(mults):
        cout = base * mult
        attn = config.resolution(i) in config.attention_levels
        for j in range(rb):
            yield from res_block(f"enc.{i}.{j}.", ch, cout)
            if attn:
                yield from attention(f"enc.{i}.{j}.attn.", cout)
            ch = cout
            skips.append(ch)
        if i < len(mults) - 1:
            yield from conv(f"down.{i}.conv", ch, ch, 3)
            skips.append(ch)

    yield from res_block("mid.0.", ch, ch)
    yield from attention("mid.attn.", ch)
    yield from res_block("mid.1.", ch, ch)

    for i in reversed(range(len(mults))):
        cout = base * mults[i]
        attn = config.resolution(i) in config.attention_levels
        for j in range(rb + 1):
            yield from res_block(f"dec.{i}.{j}.", ch + skips.pop(), cout)
            if attn:
                yield from attention(f"dec.{i}.{j}.attn.", cout)
            ch = cout
        if i > 0:
            yield from conv(f"up.{i}.conv", ch, ch, 3)
    assert not skips, "encoder/decoder skip mismatch"

    yield from norm("out.norm", ch)
    yield from conv("out.conv", IMG_CHANNELS, ch, 3, kind="out")


def param_spec(config: UNetConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map that any parameter dict must match exactly."""
    spec: dict[str, tuple[int, ...]] = {}
    for name, shape, _ in _walk(config):
        spec[name] = shape
    return spec


def cfa_layer_names(config: UNetConfig) -> tuple[str, ...]:
    """Attention layers that honor reference modes, in forward order.

    Encoder attention is excluded on purpose: reference keys/values are
    consumed only in the bottleneck and the decoder.
    """
    names = ["mid.attn"]
    for i in reversed(range(config.levels)):
        if config.resolution(i) in config.attention_levels:
            names.extend(f"dec.{i}.{j}.attn" for j in range(config.res_blocks_per_level + 1))
    return tuple(names)


def init_params(config: UNetConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """Seeded parameter initialization.

    Weights draw from a normal scaled by 1/sqrt(fan-in); biases and the
    final output conv start at zero so the untrained net predicts zero
    noise; norm scales start at one.  Each tensor gets its own derived
    seed keyed by name, so adding a parameter never shifts the others.
    """
    params: dict[str, Tensor] = {}
    for name, shape, kind in _walk(config):
        if kind in ("zero", "out"):
            arr = np.zeros(shape)
        elif kind == "one":
            arr = np.ones(shape)
        else:
            arr = seeded_normal_array(shape, derive_seed(seed, "init", name), dtype=np.float64)
            if kind == "conv":
                fan_in = shape[1] * shape[2] * shape[3]
                arr = arr / math.sqrt(fan_in)
            elif kind == "linear":
                arr = arr / math.sqrt(shape[0])
            # "table": unit-scale rows keep pose offsets comparable to the
            # time embedding so conditioning is alive from step one.
        params[name] = Tensor(arr, requires_grad=True, dtype=dtype)
    return params


@dataclass
class DenoiserCheckpoint:
    """A denoiser's full state: architecture, schedule, parameters, step."""

    config: UNetConfig
    schedule: NoiseSchedule
    params: dict[str, Tensor] = field(repr=False)
    step: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        spec = param_spec(self.config)
        got = {name: t.shape for name, t in self.params.items()}
        if got != spec:
            missing = spec.keys() - got.keys()
            extra = got.keys() - spec.keys()
            bad = {n for n in spec.keys() & got.keys() if spec[n] != got[n]}
            raise ValueError(
                "parameters do not match config: "
                f"missing={sorted(missing)} extra={sorted(extra)} wrong_shape={sorted(bad)}")
        if self.step < 0:
            raise ValueError("step must be nonnegative")
        self.schedule.validate()


def make_denoiser(config: UNetConfig, schedule: NoiseSchedule, seed: int,
                  dtype=np.float32) -> DenoiserCheckpoint:
    return DenoiserCheckpoint(config, schedule, init_params(config, seed, dtype=dtype))


# -------------------------------------------------------------------- forward

def sinusoidal_embedding(t: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    """Classic transformer-style timestep encoding, shape (len(t), dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = t.astype(np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


def _as_index_array(value, batch: int, limit: int, what: str) -> np.ndarray:
    arr = np.asarray(value)
    if arr.ndim == 0:
        arr = np.full(batch, int(arr), dtype=np.int64)
    arr = arr.astype(np.int64, copy=False)
    if arr.shape != (batch,):
        raise ValueError(f"{what} must be scalar or shape ({batch},), got {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() >= limit):
        raise ValueError(f"{what} out of range [0, {limit})")
    return arr


def _conditioning(params: dict[str, Tensor], config: UNetConfig,
                  t: np.ndarray, p: np.ndarray, dtype) -> Tensor:
    te = Tensor(sinusoidal_embedding(t, config.embed_dim, dtype=dtype), dtype=dtype)
    e = matmul(te, params["time.mlp1.w"]) + params["time.mlp1.b"]
    e = matmul(silu(e), params["time.mlp2.w"]) + params["time.mlp2.b"]
    return e + embedding(params["pose.table"], p)


def _res_block(params, prefix, h, emb, groups):
    cout = params[f"{prefix}conv1.w"].shape[0]
    y = group_norm(h, groups, params[f"{prefix}norm1.scale"], params[f"{prefix}norm1.shift"])
    y = conv2d(silu(y), params[f"{prefix}conv1.w"], params[f"{prefix}conv1.b"], pad=1)
    cond = silu(emb)
    scale = matmul(cond, params[f"{prefix}emb_scale.w"]) + params[f"{prefix}emb_scale.b"]
    shift = matmul(cond, params[f"{prefix}emb_shift.w"]) + params[f"{prefix}emb_shift.b"]
    bsz = h.shape[0]
    y = group_norm(y, groups)
    y = y * (scale.reshape(bsz, cout, 1, 1) + 1.0) + shift.reshape(bsz, cout, 1, 1)
    y = conv2d(silu(y), params[f"{prefix}conv2.w"], params[f"{prefix}conv2.b"], pad=1)
    if h.shape[1] != cout:
        h = conv2d(h, params[f"{prefix}skip.w"])
    return h + y


def _attention(params, prefix, h, groups, mode, kv_io, layer):
    """Single-head attention over spatial positions; ``layer`` is the CFA
    name under which keys/values are recorded or looked up (None for
    encoder layers, which always self-attend)."""
    bsz, c, hh, ww = h.shape
    n = hh * ww
    x = group_norm(h, groups, params[f"{prefix}norm.scale"], params[f"{prefix}norm.shift"])
    flat = reshape(transpose(x, (0, 2, 3, 1)), (bsz, n, c))
    q = matmul(flat, params[f"{prefix}q.w"]) + params[f"{prefix}q.b"]
    k = matmul(flat, params[f"{prefix}k.w"]) + params[f"{prefix}k.b"]
    v = matmul(flat, params[f"{prefix}v.w"]) + params[f"{prefix}v.b"]
    inv_sqrt_d = 1.0 / math.sqrt(c)

    if layer is None or mode in ("standard", "record_kv"):
        if layer is not None and mode == "record_kv":
            kv_io[layer] = (k.data[0].copy(), v.data[0].copy())
        logits = matmul(q, transpose(k, (0, 2, 1))) * inv_sqrt_d
        out = matmul(softmax_rows(logits), v)
    else:
        if kv_io is None or layer not in kv_io:
            raise ValueError(f"missing reference K/V for layer {layer}")
        k_ref, v_ref = kv_io[layer]
        k_ref = Tensor(np.asarray(k_ref), dtype=h.dtype)
        v_ref = Tensor(np.asarray(v_ref), dtype=h.dtype)
        if k_ref.data.ndim != 2 or k_ref.shape[1] != c or v_ref.shape != k_ref.shape:
            raise ValueError(f"reference K/V for {layer} must both be (n, {c})")
        logits = matmul(q, Tensor(k_ref.data.T, dtype=h.dtype)) * inv_sqrt_d
        if mode == "use_reference_kv":
            out = matmul(softmax_rows(logits), v_ref)
        else:  # use_reference_kv_hard: winning key picks the value row;
            # np.argmax already resolves ties to the lowest index.
            idx = np.argmax(logits.data, axis=-1)
            out = embedding(v_ref, idx)
    proj = matmul(out, params[f"{prefix}o.w"]) + params[f"{prefix}o.b"]
    return h + transpose(reshape(proj, (bsz, hh, ww, c)), (0, 3, 1, 2))


def denoiser_forward(ckpt: DenoiserCheckpoint, x_t, t, p,
                     attn_mode: str = "standard", kv_io: dict | None = None) -> Tensor:
    """Predict the noise content of ``x_t`` at timestep ``t`` under pose ``p``.

    ``attn_mode`` selects how bottleneck/decoder attention behaves:
    "standard" self-attention, "record_kv" (self-attention that also stores
    each layer's keys/values into ``kv_io``), or the reference modes that
    read per-layer (K, V) pairs from ``kv_io`` ("use_reference_kv" softmax,
    "use_reference_kv_hard" argmax).  Non-standard modes operate on a
    single image at a time.
    """
    config, params = ckpt.config, ckpt.params
    if attn_mode not in ATTN_MODES:
        raise ValueError(f"unknown attn_mode {attn_mode!r}; expected one of {ATTN_MODES}")
    model_dtype = params["in.conv.w"].dtype
    x = x_t if isinstance(x_t, Tensor) and x_t.dtype == model_dtype \
        else Tensor(x_t.data if isinstance(x_t, Tensor) else x_t, dtype=model_dtype)
    if x.data.ndim != 4 or x.shape[1] != IMG_CHANNELS \
            or x.shape[2] != config.image_size or x.shape[3] != config.image_size:
        raise ValueError(
            f"x_t shape {x.shape} != (B, {IMG_CHANNELS}, "
            f"{config.image_size}, {config.image_size})")
    bsz = x.shape[0]
    if attn_mode != "standard":
        if kv_io is None:
            raise ValueError(f"attn_mode {attn_mode!r} requires a kv_io dict")
        if bsz != 1:
            raise ValueError(f"attn_mode {attn_mode!r} operates on batch size 1, got {bsz}")
    t_arr = _as_index_array(t, bsz, ckpt.schedule.T, "t")
    p_arr = _as_index_array(p, bsz, config.pose_count, "pose")

    groups = config.groupnorm_groups
    rb = config.res_blocks_per_level
    emb = _conditioning(params, config, t_arr, p_arr, x.dtype)

    h = conv2d(x, params["in.conv.w"], params["in.conv.b"], pad=1)
    skips = [h]
    for i in range(config.levels):
        attn = config.resolution(i) in config.attention_levels
        for j in range(rb):
            h = _res_block(params, f"enc.{i}.{j}.", h, emb, groups)
            if attn:
                h = _attention(params, f"enc.{i}.{j}.attn.", h, groups,
                               attn_mode, kv_io, layer=None)
            skips.append(h)
        if i < config.levels - 1:
            h = conv2d(h, params[f"down.{i}.conv.w"], params[f"down.{i}.conv.b"],
                       stride=2, pad=1)
            skips.append(h)

    h = _res_block(params, "mid.0.", h, emb, groups)
    h = _attention(params, "mid.attn.", h, groups, attn_mode, kv_io, layer="mid.attn")
    h = _res_block(params, "mid.1.", h, emb, groups)

    for i in reversed(range(config.levels)):
        attn = config.resolution(i) in config.attention_levels
        for j in range(rb + 1):
            h = _res_block(params, f"dec.{i}.{j}.", concat([h, skips.pop()], 1), emb, groups)
            if attn:
                h = _attention(params, f"dec.{i}.{j}.attn.", h, groups,
                               attn_mode, kv_io, layer=f"dec.{i}.{j}.attn")
        if i > 0:
            h = conv2d(nearest_upsample(h, 2),
                       params[f"up.{i}.conv.w"], params[f"up.{i}.conv.b"], pad=1)
    assert not skips

    h = group_norm(h, groups, params["out.norm.scale"], params["out.norm.shift"])
    return conv2d(silu(h), params["out.conv.w"], params["out.conv.b"], pad=1)
