"""Trainable touch encoder: patch transformer with sensor-specific prefix tokens.

The encoder maps an (H, W, 3) touch image plus a sensor index to a unit-norm
embedding. Sequence layout is [L prefix tokens for the sensor ; patch tokens
with positional encodings], run through pre-norm attention blocks, then
mean-pooled over patch positions only (prefix tokens are excluded so sensor
identity cannot leak into pooling for free), projected and L2-normalized.

Forward and backward are written directly in numpy. All functions are
dtype-agnostic: feed float64 parameters and images to get a float64 graph,
which is what the finite-difference gradient tests rely on.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

LN_EPS = 1e-6
INIT_STD = 0.02
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class EncoderConfig:
    """Shapes of the encoder. Defaults are the desk-scale configuration;
    paper-scale settings (24 blocks, 16 heads, out_dim 1024) validate fine."""

    h: int = 32
    w: int = 32
    patch_size: int = 8
    dim: int = 64  # token dimension D
    n_blocks: int = 2
    n_heads: int = 4
    out_dim: int = 32  # embedding dimension C
    tokens_per_sensor: int = 5  # L; 0 disables sensor tokens
    n_sensors: int = 3  # K

    def validate(self) -> None:
        if self.h % self.patch_size or self.w % self.patch_size:
            raise ValueError(
                f"image {self.h}x{self.w} not divisible by patch size {self.patch_size}"
            )
        if self.dim % self.n_heads:
            raise ValueError(f"dim {self.dim} not divisible by {self.n_heads} heads")
        if self.tokens_per_sensor < 0:
            raise ValueError("tokens_per_sensor must be >= 0")
        if self.n_sensors < 1:
            raise ValueError("need at least one sensor")
        if min(self.h, self.w, self.patch_size, self.dim, self.n_blocks, self.n_heads, self.out_dim) < 1:
            raise ValueError("all size fields must be positive")

    @property
    def n_patches(self) -> int:
        return (self.h // self.patch_size) * (self.w // self.patch_size)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "EncoderConfig":
        known = {f.name for f in dataclasses.fields(EncoderConfig)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown encoder config fields: {sorted(unknown)}")
        cfg = EncoderConfig(**{k: int(v) for k, v in d.items()})
        cfg.validate()
        return cfg


@dataclass
class SensorTokenBank:
    """Trainable prefix tokens plus frozen per-sensor pixel prototypes."""

    tokens: np.ndarray | None  # (K, L, D), None when L = 0
    prototypes: np.ndarray | None  # (K, 3) mean raw pixel per sensor


def param_order(config: EncoderConfig) -> list[str]:
    """Canonical tensor order used by init, checkpoints and the optimizer."""
    names = ["patch_w", "patch_b", "pos"]
    if config.tokens_per_sensor > 0:
        names.append("sensor_tokens")
    for i in range(config.n_blocks):
        names += [
            f"blocks.{i}.ln1_g",
            f"blocks.{i}.ln1_b",
            f"blocks.{i}.qkv_w",
            f"blocks.{i}.qkv_b",
            f"blocks.{i}.attn_out_w",
            f"blocks.{i}.attn_out_b",
            f"blocks.{i}.ln2_g",
            f"blocks.{i}.ln2_b",
            f"blocks.{i}.mlp_w1",
            f"blocks.{i}.mlp_b1",
            f"blocks.{i}.mlp_w2",
            f"blocks.{i}.mlp_b2",
        ]
    names += ["final_ln_g", "final_ln_b", "proj_w", "proj_b"]
    return names


def _param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    p, d, c = config.patch_size, config.dim, config.out_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch_w": (p * p * 3, d),
        "patch_b": (d,),
        "pos": (config.n_patches, d),
    }
    if config.tokens_per_sensor > 0:
        shapes["sensor_tokens"] = (config.n_sensors, config.tokens_per_sensor, d)
    for i in range(config.n_blocks):
        shapes.update(
            {
                f"blocks.{i}.ln1_g": (d,),
                f"blocks.{i}.ln1_b": (d,),
                f"blocks.{i}.qkv_w": (d, 3 * d),
                f"blocks.{i}.qkv_b": (3 * d,),
                f"blocks.{i}.attn_out_w": (d, d),
                f"blocks.{i}.attn_out_b": (d,),
                f"blocks.{i}.ln2_g": (d,),
                f"blocks.{i}.ln2_b": (d,),
                f"blocks.{i}.mlp_w1": (d, 4 * d),
                f"blocks.{i}.mlp_b1": (4 * d,),
                f"blocks.{i}.mlp_w2": (4 * d, d),
                f"blocks.{i}.mlp_b2": (d,),
            }
        )
    shapes.update(
        {
            "final_ln_g": (d,),
            "final_ln_b": (d,),
            "proj_w": (d, c),
            "proj_b": (c,),
        }
    )
    return shapes


def _init_kind(name: str) -> str:
    if name.endswith(("ln1_g", "ln2_g")) or name == "final_ln_g":
        return "ones"
    if name.endswith(("ln1_b", "ln2_b", "patch_b", "proj_b", "qkv_b", "attn_out_b", "mlp_b1", "mlp_b2")) or name == "final_ln_b":
        return "zeros"
    return "gauss"


def init_params(config: EncoderConfig, seed: int) -> dict[str, np.ndarray]:
    """Deterministic init: Gaussian std 0.02 weights, zero biases, unit LN gains."""
    config.validate()
    rng = np.random.default_rng(seed)
    shapes = _param_shapes(config)
    params: dict[str, np.ndarray] = {}
    for name in param_order(config):
        shape = shapes[name]
        kind = _init_kind(name)
        if kind == "zeros":
            params[name] = np.zeros(shape, dtype=np.float32)
        elif kind == "ones":
            params[name] = np.ones(shape, dtype=np.float32)
        else:
            params[name] = rng.normal(0.0, INIT_STD, size=shape).astype(np.float32)
    return params


def extract_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, H, W, 3) -> (B, n_patches, patch_size*patch_size*3), row-major patches."""
    b, h, w, ch = images.shape
    p = patch_size
    x = images.reshape(b, h // p, p, w // p, p, ch)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x).reshape(b, (h // p) * (w // p), p * p * ch)


def _layernorm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _layernorm_backward(dy: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    mean1 = dxhat.mean(axis=-1, keepdims=True)
    mean2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = (dxhat - mean1 - xhat * mean2) * inv
    return dx, dg, db


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI


def _softmax_lastaxis(s: np.ndarray) -> np.ndarray:
    # Max subtraction keeps exp() finite for sharp attention logits.
    shifted = s - s.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def forward_batch(
    params: dict[str, np.ndarray],
    config: EncoderConfig,
    images: np.ndarray,
    sensor_indices: np.ndarray,
    want_cache: bool = True,
):
    """Encode a batch; returns (embeddings (B, C) unit rows, cache or None)."""
    b = images.shape[0]
    if images.shape[1:] != (config.h, config.w, 3):
        raise ValueError(f"image batch shape {images.shape[1:]} != {(config.h, config.w, 3)}")
    sensor_indices = np.asarray(sensor_indices)
    if sensor_indices.shape != (b,):
        raise ValueError("sensor_indices must be (B,)")
    if np.any(sensor_indices < 0) or np.any(sensor_indices >= config.n_sensors):
        raise ValueError("sensor index out of range")

    dtype = params["patch_w"].dtype
    el = config.tokens_per_sensor
    patches = extract_patches(images.astype(dtype, copy=False), config.patch_size)
    xp = patches @ params["patch_w"] + params["patch_b"] + params["pos"]
    if el > 0:
        prefix = params["sensor_tokens"][sensor_indices]
        x = np.concatenate([prefix, xp], axis=1)
    else:
        x = xp
    t = x.shape[1]

    nh = config.n_heads
    dh = config.dim // nh
    scale = 1.0 / math.sqrt(dh)
    blocks_cache = []
    for i in range(config.n_blocks):
        pre = f"blocks.{i}."
        x_in = x
        h1, ln1c = _layernorm(x, params[pre + "ln1_g"], params[pre + "ln1_b"])
        qkv = h1 @ params[pre + "qkv_w"] + params[pre + "qkv_b"]
        q, k, v = np.split(qkv, 3, axis=-1)
        q = q.reshape(b, t, nh, dh).transpose(0, 2, 1, 3)
        k = k.reshape(b, t, nh, dh).transpose(0, 2, 1, 3)
        v = v.reshape(b, t, nh, dh).transpose(0, 2, 1, 3)
        scores = (q @ k.swapaxes(-1, -2)) * scale
        att = _softmax_lastaxis(scores)
        ctx = att @ v
        ctx2 = np.ascontiguousarray(ctx.transpose(0, 2, 1, 3)).reshape(b, t, config.dim)
        attn_out = ctx2 @ params[pre + "attn_out_w"] + params[pre + "attn_out_b"]
        x = x_in + attn_out
        x_mid = x
        h2, ln2c = _layernorm(x, params[pre + "ln2_g"], params[pre + "ln2_b"])
        m1 = h2 @ params[pre + "mlp_w1"] + params[pre + "mlp_b1"]
        a1 = _gelu(m1)
        m2 = a1 @ params[pre + "mlp_w2"] + params[pre + "mlp_b2"]
        x = x_mid + m2
        if want_cache:
            blocks_cache.append((x_in, h1, ln1c, q, k, v, att, ctx2, x_mid, h2, ln2c, m1, a1))

    hf, lnfc = _layernorm(x, params["final_ln_g"], params["final_ln_b"])
    pooled = hf[:, el:, :].mean(axis=1)
    z = pooled @ params["proj_w"] + params["proj_b"]
    norms = np.sqrt((z * z).sum(axis=-1, keepdims=True))
    emb = z / norms

    cache = None
    if want_cache:
        cache = {
            "config": config,
            "sensor_indices": sensor_indices,
            "patches": patches,
            "blocks": blocks_cache,
            "hf": hf,
            "lnfc": lnfc,
            "pooled": pooled,
            "z": z,
            "norms": norms,
            "emb": emb,
            "t": t,
        }
    return emb, cache


def backward_batch(
    params: dict[str, np.ndarray], cache: dict, d_emb: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter tensor, given dLoss/dEmb."""
    config: EncoderConfig = cache["config"]
    b, t = cache["patches"].shape[0], cache["t"]
    el = config.tokens_per_sensor
    nh = config.n_heads
    dh = config.dim // nh
    scale = 1.0 / math.sqrt(dh)
    n_patch = config.n_patches
    grads: dict[str, np.ndarray] = {}

    # L2 normalization: z = emb * |z|, dz = (de - emb (de . emb)) / |z|
    emb, norms, z = cache["emb"], cache["norms"], cache["z"]
    dz = (d_emb - emb * (d_emb * emb).sum(axis=-1, keepdims=True)) / norms

    pooled = cache["pooled"]
    grads["proj_w"] = pooled.T @ dz
    grads["proj_b"] = dz.sum(axis=0)
    d_pooled = dz @ params["proj_w"].T

    d_hf = np.zeros_like(cache["hf"])
    d_hf[:, el:, :] = d_pooled[:, None, :] / n_patch
    dx, dg, db = _layernorm_backward(d_hf, cache["lnfc"])
    grads["final_ln_g"] = dg
    grads["final_ln_b"] = db

    for i in reversed(range(config.n_blocks)):
        pre = f"blocks.{i}."
        (x_in, h1, ln1c, q, k, v, att, ctx2, x_mid, h2, ln2c, m1, a1) = cache["blocks"][i]

        # MLP residual branch
        d_m2 = dx
        grads[pre + "mlp_w2"] = a1.reshape(-1, a1.shape[-1]).T @ d_m2.reshape(-1, d_m2.shape[-1])
        grads[pre + "mlp_b2"] = d_m2.sum(axis=(0, 1))
        d_a1 = d_m2 @ params[pre + "mlp_w2"].T
        d_m1 = d_a1 * _gelu_grad(m1)
        grads[pre + "mlp_w1"] = h2.reshape(-1, h2.shape[-1]).T @ d_m1.reshape(-1, d_m1.shape[-1])
        grads[pre + "mlp_b1"] = d_m1.sum(axis=(0, 1))
        d_h2 = d_m1 @ params[pre + "mlp_w1"].T
        d_x_mid_ln, dg2, db2 = _layernorm_backward(d_h2, ln2c)
        grads[pre + "ln2_g"] = dg2
        grads[pre + "ln2_b"] = db2
        dx = dx + d_x_mid_ln  # residual add

        # Attention residual branch
        d_attn_out = dx
        grads[pre + "attn_out_w"] = ctx2.reshape(-1, config.dim).T @ d_attn_out.reshape(-1, config.dim)
        grads[pre + "attn_out_b"] = d_attn_out.sum(axis=(0, 1))
        d_ctx2 = d_attn_out @ params[pre + "attn_out_w"].T
        d_ctx = d_ctx2.reshape(b, t, nh, dh).transpose(0, 2, 1, 3)
        d_att = d_ctx @ v.swapaxes(-1, -2)
        d_v = att.swapaxes(-1, -2) @ d_ctx
        d_scores = att * (d_att - (d_att * att).sum(axis=-1, keepdims=True))
        d_q = (d_scores @ k) * scale
        d_k = (d_scores.swapaxes(-1, -2) @ q) * scale
        d_qkv = np.concatenate(
            [
                d_q.transpose(0, 2, 1, 3).reshape(b, t, config.dim),
                d_k.transpose(0, 2, 1, 3).reshape(b, t, config.dim),
                d_v.transpose(0, 2, 1, 3).reshape(b, t, config.dim),
            ],
            axis=-1,
        )
        grads[pre + "qkv_w"] = h1.reshape(-1, config.dim).T @ d_qkv.reshape(-1, 3 * config.dim)
        grads[pre + "qkv_b"] = d_qkv.sum(axis=(0, 1))
        d_h1 = d_qkv @ params[pre + "qkv_w"].T
        d_x_in_ln, dg1, db1 = _layernorm_backward(d_h1, ln1c)
        grads[pre + "ln1_g"] = dg1
        grads[pre + "ln1_b"] = db1
        dx = dx + d_x_in_ln

    if el > 0:
        d_prefix = dx[:, :el, :]
        d_tokens = np.zeros_like(params["sensor_tokens"])
        np.add.at(d_tokens, cache["sensor_indices"], d_prefix)
        grads["sensor_tokens"] = d_tokens
        d_xp = dx[:, el:, :]
    else:
        d_xp = dx

    grads["pos"] = d_xp.sum(axis=0)
    patches = cache["patches"]
    grads["patch_w"] = patches.reshape(-1, patches.shape[-1]).T @ d_xp.reshape(-1, config.dim)
    grads["patch_b"] = d_xp.sum(axis=(0, 1))
    return grads


def encode_touch(
    image: np.ndarray, sensor_index: int, params: dict[str, np.ndarray], config: EncoderConfig
) -> np.ndarray:
    """Single-image convenience wrapper; returns a unit-norm (C,) embedding."""
    emb, _ = forward_batch(
        params, config, image[None], np.array([sensor_index]), want_cache=False
    )
    return emb[0]


def encode_batch(
    params: dict[str, np.ndarray],
    config: EncoderConfig,
    images: np.ndarray,
    sensor_indices: np.ndarray,
    batch_size: int = 256,
) -> np.ndarray:
    """Chunked forward-only encoding for evaluation."""
    out = []
    for lo in range(0, images.shape[0], batch_size):
        emb, _ = forward_batch(
            params, config, images[lo : lo + batch_size], sensor_indices[lo : lo + batch_size],
            want_cache=False,
        )
        out.append(emb)
    return np.concatenate(out, axis=0) if out else np.empty((0, config.out_dim), np.float32)


def compute_prototypes(dataset, split: str = "train") -> np.ndarray:
    """Per-sensor mean raw pixel over the split's touch images, shape (K, 3).

    The prototype of sensor k is the mean over its images of the per-image
    mean RGB pixel; with equal image sizes that equals the grand pixel mean.
    """
    k = dataset.k
    protos = np.zeros((k, 3), dtype=np.float64)
    counts = np.zeros(k, dtype=np.int64)
    for part in dataset.parts:
        idx = part.split_indices(split)
        if idx.size == 0:
            continue
        per_image = part.touch[idx].mean(axis=(1, 2))  # (n, 3)
        protos[part.sensor_id] += per_image.sum(axis=0)
        counts[part.sensor_id] += idx.size
    if np.any(counts == 0):
        missing = [int(s) for s in np.nonzero(counts == 0)[0]]
        raise ValueError(f"sensors {missing} have no {split} images to average")
    return (protos / counts[:, None]).astype(np.float64)


def resolve_sensor(image: np.ndarray, prototypes: np.ndarray) -> int:
    """argmin_k L1(mean pixel of image, prototype k); ties go to the lowest index."""
    prototypes = np.asarray(prototypes)
    if prototypes.ndim != 2 or prototypes.shape[0] < 1 or prototypes.shape[1] != 3:
        raise ValueError("prototypes must be (K, 3) with K >= 1")
    mean_pixel = np.asarray(image, dtype=np.float64).mean(axis=(0, 1))
    dists = np.abs(prototypes - mean_pixel[None, :]).sum(axis=1)
    return int(np.argmin(dists))


def resolve_sensors_batch(images: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    prototypes = np.asarray(prototypes)
    mean_pixels = images.astype(np.float64).mean(axis=(1, 2))  # (n, 3)
    dists = np.abs(mean_pixels[:, None, :] - prototypes[None, :, :]).sum(axis=2)
    return np.argmin(dists, axis=1)
