"""Training loop: mixed-source batches -> encoder -> symmetric InfoNCE -> AdamW.

Determinism contract: (dataset bytes, TrainConfig) fully determine the
checkpoint bytes. All randomness flows through two seeded PCG64 streams
(parameter init, batch sampling); the sampling stream's state is stored in
every checkpoint so a resumed run replays the exact batch sequence of an
uninterrupted one.

Decoupled weight decay is applied to every parameter tensor, LayerNorm and
sensor tokens included: a zero-gradient step changes each tensor by exactly
-lr * wd * theta.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import tensorio
from .anchor import AnchorConfig, AnchorSpace, build_anchor, vision_embeddings
from .datagen import Dataset
from .encoder import EncoderConfig, compute_prototypes, forward_batch, init_params, param_order
from .objective import ContrastiveBatch, PairBatch, loss_gradient, total_loss
from .sampler import SamplerConfig, draw_batch, restore_rng, rng_state

log = logging.getLogger("touchalign.trainer")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-3  # desk-scale default; ViT-L scale runs use 1e-5
    weight_decay: float = 0.05
    epochs: int = 30  # 150 at paper scale
    warmup_steps: int = 0
    tau: float = 0.07
    sigma: float = 0.75
    batch_size: int = 48
    use_sensor_tokens: bool = True
    use_mix_sampling: bool = True
    seed: int = 0
    grad_clip: float = 1.0  # global-norm ceiling; 0 disables
    checkpoint_every_epochs: int = 0  # 0 = no mid-run checkpoints
    anchor_beta: float = 0.45
    anchor_seed: int = 0
    encoder: EncoderConfig = EncoderConfig()

    def validate(self) -> None:
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError("sigma outside [0, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.weight_decay < 0 or self.warmup_steps < 0 or self.checkpoint_every_epochs < 0:
            raise ValueError("negative hyperparameter")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0")
        self.encoder.validate()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        kwargs = dict(d)
        if "encoder" in kwargs:
            kwargs["encoder"] = EncoderConfig.from_dict(kwargs["encoder"])
        cfg = TrainConfig(**kwargs)
        cfg.validate()
        return cfg


@dataclass
class OptimizerState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @staticmethod
    def fresh(params: dict[str, np.ndarray]) -> "OptimizerState":
        return OptimizerState(
            step=0,
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
        )


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    encoder_config: EncoderConfig  # effective (tokens_per_sensor=0 when disabled)
    train_config: TrainConfig
    anchor_config: AnchorConfig
    prototypes: np.ndarray  # (K, 3)
    opt_state: OptimizerState
    sampler_state: dict
    step: int
    epoch: int
    metrics: list[dict[str, Any]] = field(default_factory=list)


def lr_at(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine decay from base_lr at step 0 to 0 at total_steps."""
    if total_steps == 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def schedule_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0) -> float:
    """Linear warmup (when configured) feeding the cosine decay."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    cosine_total = max(1, total_steps - warmup_steps)
    return lr_at(step - warmup_steps, cosine_total, base_lr)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so the global L2 norm is <= max_norm."""
    sq = 0.0
    for g in grads.values():
        sq += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        scale = np.float32(max_norm / norm)
        for g in grads.values():
            g *= scale
    return norm


def adamw_update(
    params: dict[str, np.ndarray],
    opt: OptimizerState,
    grads: dict[str, np.ndarray],
    lr: float,
    weight_decay: float,
) -> None:
    opt.step += 1
    t = opt.step
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name, theta in params.items():
        g = grads[name]
        m = opt.m[name]
        v = opt.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        theta -= lr * (update + weight_decay * theta)


def train_step(
    params: dict[str, np.ndarray],
    opt: OptimizerState,
    batch: ContrastiveBatch,
    tau: float,
    lr: float,
    encoder_config: EncoderConfig,
    weight_decay: float = 0.05,
    grad_clip: float = 1.0,
) -> float:
    """One optimization step; mutates params and opt in place, returns the loss."""
    loss, grads = loss_gradient(params, batch, tau, encoder_config)
    clip_global_norm(grads, grad_clip)
    adamw_update(params, opt, grads, lr, weight_decay)
    return loss


class _TrainPools:
    """Per-dataset training pools: images, frozen anchor targets, sensor ids."""

    def __init__(self, dataset: Dataset, space: AnchorSpace):
        self.touch: list[np.ndarray] = []
        self.anchors: list[np.ndarray] = []
        self.sensor: list[int] = []
        for part in dataset.parts:
            idx = part.split_indices("train")
            if idx.size == 0:
                raise ValueError(f"dataset {part.name} has no training samples")
            self.touch.append(np.ascontiguousarray(part.touch[idx]))
            emb = vision_embeddings(
                space,
                part.material_class[idx],
                part.texture_frequency[idx],
                part.contact_depth[idx],
                part.contact_center[idx],
                part.grasp_outcome[idx],
            )
            self.anchors.append(emb.astype(np.float32))
            self.sensor.append(part.sensor_id)
        self.sizes = [t.shape[0] for t in self.touch]
        self.total = sum(self.sizes)
        self._bounds = np.cumsum(self.sizes)

    def gather(self, dataset_ids: np.ndarray, local_indices: np.ndarray) -> ContrastiveBatch:
        b = dataset_ids.shape[0]
        h, w = self.touch[0].shape[1:3]
        c = self.anchors[0].shape[1]
        images = np.empty((b, h, w, 3), dtype=np.float32)
        anchors = np.empty((b, c), dtype=np.float32)
        sensors = np.empty(b, dtype=np.int64)
        for d in np.unique(dataset_ids):
            mask = dataset_ids == d
            loc = local_indices[mask]
            images[mask] = self.touch[d][loc]
            anchors[mask] = self.anchors[d][loc]
            sensors[mask] = self.sensor[d]
        return ContrastiveBatch(
            images=images, sensor_indices=sensors, anchors=anchors, dataset_ids=dataset_ids
        )

    def flat_to_pair(self, flat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        which = np.searchsorted(self._bounds, flat, side="right")
        starts = self._bounds - np.array(self.sizes)
        return which.astype(np.int64), (flat - starts[which]).astype(np.int64)


def _val_arrays(dataset: Dataset, space: AnchorSpace):
    images, anchors, sensors = [], [], []
    for part in dataset.parts:
        idx = part.split_indices("val")
        if idx.size == 0:
            continue
        images.append(part.touch[idx])
        emb = vision_embeddings(
            space,
            part.material_class[idx],
            part.texture_frequency[idx],
            part.contact_depth[idx],
            part.contact_center[idx],
            part.grasp_outcome[idx],
        )
        anchors.append(emb.astype(np.float32))
        sensors.append(np.full(idx.size, part.sensor_id, dtype=np.int64))
    if not images:
        return None
    return (
        np.concatenate(images),
        np.concatenate(anchors),
        np.concatenate(sensors),
    )


def _validation_loss(
    params: dict[str, np.ndarray],
    enc_cfg: EncoderConfig,
    val,
    tau: float,
    batch_size: int,
) -> float | None:
    if val is None:
        return None
    images, anchors, sensors = val
    total, weight = 0.0, 0
    for lo in range(0, images.shape[0], batch_size):
        imgs = images[lo : lo + batch_size]
        emb, _ = forward_batch(params, enc_cfg, imgs, sensors[lo : lo + batch_size], want_cache=False)
        loss = total_loss(PairBatch(touch=emb, vision=anchors[lo : lo + batch_size]), tau)
        total += loss * imgs.shape[0]
        weight += imgs.shape[0]
    return total / weight


def fit(
    dataset: Dataset,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    resume: bool = False,
) -> Checkpoint:
    """Full training run; writes checkpoint + metrics when out_dir is given."""
    config.validate()
    enc_cfg = config.encoder
    if not config.use_sensor_tokens:
        enc_cfg = dataclasses.replace(enc_cfg, tokens_per_sensor=0)
    if enc_cfg.n_sensors != dataset.k:
        raise ValueError(f"encoder expects {enc_cfg.n_sensors} sensors, dataset has {dataset.k}")
    if (enc_cfg.h, enc_cfg.w) != (dataset.config.image_size, dataset.config.image_size):
        raise ValueError("encoder image size does not match dataset")

    anchor_cfg = AnchorConfig(
        c=enc_cfg.out_dim, m=dataset.m, beta=config.anchor_beta, seed=config.anchor_seed
    )
    space = build_anchor(anchor_cfg)
    anchor_hash = space.content_hash()

    pools = _TrainPools(dataset, space)
    val = _val_arrays(dataset, space)
    b = config.batch_size
    steps_per_epoch = math.ceil(pools.total / b)
    total_steps = config.epochs * steps_per_epoch
    sampler_cfg = SamplerConfig(sigma=config.sigma, batch_size=b, seed=config.seed)

    params = init_params(enc_cfg, config.seed)
    opt = OptimizerState.fresh(params)
    rng = np.random.default_rng([config.seed, 1])
    metrics: list[dict[str, Any]] = []
    start_epoch = 0

    if resume:
        if out_dir is None:
            raise ValueError("resume requires out_dir")
        mid = Path(out_dir) / "mid"
        if not (mid / "checkpoint.json").exists():
            raise ValueError(f"no mid-run checkpoint under {mid}")
        ckpt = load_checkpoint(mid)
        if ckpt.encoder_config != enc_cfg:
            raise ValueError("mid-run checkpoint encoder config does not match")
        params = ckpt.params
        opt = ckpt.opt_state
        rng = restore_rng(ckpt.sampler_state)
        metrics = list(ckpt.metrics)
        start_epoch = ckpt.epoch
        log.info("resuming at epoch %d", start_epoch)

    for epoch in range(start_epoch, config.epochs):
        losses = []
        lr = config.base_lr
        for s in range(steps_per_epoch):
            gstep = epoch * steps_per_epoch + s
            lr = schedule_lr(gstep, total_steps, config.base_lr, config.warmup_steps)
            if config.use_mix_sampling:
                drawn, rng = draw_batch(pools.sizes, sampler_cfg, rng)
                batch = pools.gather(drawn.dataset_ids, drawn.local_indices)
            else:
                flat = rng.integers(0, pools.total, size=b)
                ds_ids, locals_ = pools.flat_to_pair(flat)
                batch = pools.gather(ds_ids, locals_)
            loss = train_step(
                params, opt, batch, config.tau, lr, enc_cfg,
                weight_decay=config.weight_decay, grad_clip=config.grad_clip,
            )
            losses.append(loss)
        val_loss = _validation_loss(params, enc_cfg, val, config.tau, b)
        record = {
            "step": (epoch + 1) * steps_per_epoch,
            "epoch": epoch + 1,
            "loss": float(np.mean(losses)),
            "val_loss": None if val_loss is None else float(val_loss),
            "lr": float(lr),
        }
        metrics.append(record)
        log.info(
            "epoch %d/%d loss %.4f val %s lr %.3e",
            epoch + 1, config.epochs, record["loss"],
            "n/a" if val_loss is None else f"{val_loss:.4f}", lr,
        )
        finished = epoch + 1
        if (
            out_dir is not None
            and config.checkpoint_every_epochs > 0
            and finished % config.checkpoint_every_epochs == 0
            and finished < config.epochs
        ):
            mid_ckpt = Checkpoint(
                params=params,
                encoder_config=enc_cfg,
                train_config=config,
                anchor_config=anchor_cfg,
                prototypes=np.zeros((dataset.k, 3)),
                opt_state=opt,
                sampler_state=rng_state(rng),
                step=opt.step,
                epoch=finished,
                metrics=metrics,
            )
            save_checkpoint(mid_ckpt, Path(out_dir) / "mid", mid=True)

    if space.content_hash() != anchor_hash:
        raise RuntimeError("anchor space mutated during training; freeze contract violated")

    ckpt = Checkpoint(
        params=params,
        encoder_config=enc_cfg,
        train_config=config,
        anchor_config=anchor_cfg,
        prototypes=compute_prototypes(dataset, "train"),
        opt_state=opt,
        sampler_state=rng_state(rng),
        step=opt.step,
        epoch=config.epochs,
        metrics=metrics,
    )
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir)
        write_metrics(metrics, Path(out_dir) / "metrics.ndjson")
    return ckpt


def write_metrics(metrics: list[dict[str, Any]], path: str | Path) -> None:
    lines = [tensorio.json_line(rec) for rec in metrics]
    Path(path).write_text("".join(lines), encoding="utf-8")


def save_checkpoint(ckpt: Checkpoint, dir_path: str | Path, mid: bool = False) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name in param_order(ckpt.encoder_config):
        arrays[name] = ckpt.params[name]
    for name in param_order(ckpt.encoder_config):
        arrays["adam_m." + name] = ckpt.opt_state.m[name]
    for name in param_order(ckpt.encoder_config):
        arrays["adam_v." + name] = ckpt.opt_state.v[name]
    header = {
        "encoder": ckpt.encoder_config.to_dict(),
        "train": ckpt.train_config.to_dict(),
        "anchor": ckpt.anchor_config.to_dict(),
        "optimizer": {
            "name": "adamw",
            "beta1": ADAM_BETA1,
            "beta2": ADAM_BETA2,
            "eps": ADAM_EPS,
            "weight_decay": ckpt.train_config.weight_decay,
            "base_lr": ckpt.train_config.base_lr,
            "step": ckpt.opt_state.step,
        },
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "prototypes": [[float(x) for x in row] for row in np.asarray(ckpt.prototypes)],
        "sampler_rng": ckpt.sampler_state,
        "metrics": ckpt.metrics,
        "mid": mid,
    }
    tensorio.write_named_blob(dir_path, arrays, header_extra=header)


def load_checkpoint(dir_path: str | Path) -> Checkpoint:
    arrays, header = tensorio.read_named_blob(dir_path)
    enc_cfg = EncoderConfig.from_dict(header["encoder"])
    train_cfg = TrainConfig.from_dict(header["train"])
    anchor_cfg = AnchorConfig.from_dict(header["anchor"])
    params: dict[str, np.ndarray] = {}
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    for name, arr in arrays.items():
        if name.startswith("adam_m."):
            m[name[len("adam_m.") :]] = arr
        elif name.startswith("adam_v."):
            v[name[len("adam_v.") :]] = arr
        else:
            params[name] = arr
    expected = set(param_order(enc_cfg))
    if set(params) != expected or set(m) != expected or set(v) != expected:
        raise tensorio.FormatError("checkpoint tensors do not match encoder config")
    return Checkpoint(
        params=params,
        encoder_config=enc_cfg,
        train_config=train_cfg,
        anchor_config=anchor_cfg,
        prototypes=np.array(header["prototypes"], dtype=np.float64),
        opt_state=OptimizerState(step=int(header["optimizer"]["step"]), m=m, v=v),
        sampler_state=header["sampler_rng"],
        step=int(header["step"]),
        epoch=int(header["epoch"]),
        metrics=list(header.get("metrics", [])),
    )
