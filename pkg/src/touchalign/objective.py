"""Symmetric InfoNCE alignment objective and its gradient through the encoder.

Both directions use temperature-scaled softmax cross-entropy over in-batch
candidates, with the positive kept in the denominator. Loss values are
computed in float64 with row-max subtraction, so they stay finite and
oracle-exact down to tau = 0.01 even for adversarial +-1 similarities. The
anchor side is frozen: gradients flow only into the touch encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoder as enc

DEFAULT_TAU = 0.07


@dataclass(frozen=True)
class LossConfig:
    temperature: float = DEFAULT_TAU

    def validate(self) -> None:
        _check_tau(self.temperature)


@dataclass
class PairBatch:
    """Aligned touch/vision embedding pairs plus their source dataset ids."""

    touch: np.ndarray  # (B, C) unit rows
    vision: np.ndarray  # (B, C) unit rows
    dataset_ids: np.ndarray | None = None  # (B,) optional provenance

    @property
    def size(self) -> int:
        return int(self.touch.shape[0])


@dataclass
class ContrastiveBatch:
    """Raw training batch: images plus frozen anchor targets."""

    images: np.ndarray  # (B, H, W, 3)
    sensor_indices: np.ndarray  # (B,)
    anchors: np.ndarray  # (B, C) frozen anchor embeddings
    dataset_ids: np.ndarray | None = None


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def _validate_pair(batch: PairBatch) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(batch.touch, dtype=np.float64)
    v = np.asarray(batch.vision, dtype=np.float64)
    if t.ndim != 2 or v.shape != t.shape:
        raise ValueError(f"embedding sets disagree: {t.shape} vs {v.shape}")
    if t.shape[0] < 1:
        raise ValueError("batch must hold at least one pair")
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
        raise ValueError("non-finite embedding in batch")
    for name, arr in (("touch", t), ("vision", v)):
        norms = np.linalg.norm(arr, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-4):
            worst = float(np.abs(norms - 1.0).max())
            raise ValueError(f"{name} embeddings not unit norm (max deviation {worst:.2e})")
    return t, v


def _directional_nce(queries: np.ndarray, candidates: np.ndarray, tau: float) -> float:
    """Mean over rows of logsumexp(S_row) - S_ii, S = queries @ candidates.T / tau."""
    s = (queries @ candidates.T) / tau
    row_max = s.max(axis=1, keepdims=True)
    lse = row_max[:, 0] + np.log(np.exp(s - row_max).sum(axis=1))
    value = float(np.mean(lse - np.diag(s)))
    # Mathematically >= 0; clamp the ~1e-16 rounding dust so the invariant is exact.
    return max(value, 0.0)


def info_nce_t2v(batch: PairBatch, tau: float = DEFAULT_TAU) -> float:
    """Touch queries against in-batch vision candidates."""
    _check_tau(tau)
    t, v = _validate_pair(batch)
    return _directional_nce(t, v, tau)


def info_nce_v2t(batch: PairBatch, tau: float = DEFAULT_TAU) -> float:
    """Vision queries against in-batch touch candidates."""
    _check_tau(tau)
    t, v = _validate_pair(batch)
    return _directional_nce(v, t, tau)


def total_loss(batch: PairBatch, tau: float = DEFAULT_TAU) -> float:
    _check_tau(tau)
    t, v = _validate_pair(batch)
    return _directional_nce(t, v, tau) + _directional_nce(v, t, tau)


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def loss_gradient(
    params: dict[str, np.ndarray],
    batch: ContrastiveBatch,
    tau: float,
    config: enc.EncoderConfig,
) -> tuple[float, dict[str, np.ndarray]]:
    """Total symmetric loss and its gradients w.r.t. every encoder tensor.

    The anchor embeddings are treated as constants; no gradient is produced
    for them by construction. Softmax algebra runs in float64 regardless of
    the parameter dtype, then the embedding gradient is cast back.
    """
    _check_tau(tau)
    anchors = np.asarray(batch.anchors, dtype=np.float64)
    if not np.all(np.isfinite(anchors)):
        raise ValueError("non-finite anchor embedding")
    emb, cache = enc.forward_batch(params, config, batch.images, batch.sensor_indices)
    t64 = emb.astype(np.float64)
    b = t64.shape[0]

    s = (t64 @ anchors.T) / tau
    row_max = s.max(axis=1, keepdims=True)
    lse_rows = row_max[:, 0] + np.log(np.exp(s - row_max).sum(axis=1))
    st = s.T
    col_max = st.max(axis=1, keepdims=True)
    lse_cols = col_max[:, 0] + np.log(np.exp(st - col_max).sum(axis=1))
    diag = np.diag(s)
    loss = max(float(np.mean(lse_rows - diag)), 0.0) + max(float(np.mean(lse_cols - diag)), 0.0)
    if not np.isfinite(loss):
        raise RuntimeError(
            f"non-finite contrastive loss (B={b}, tau={tau}); check inputs and learning rate"
        )

    eye = np.eye(b)
    d_s = (_softmax_rows(s) - eye) / b + ((_softmax_rows(st) - eye) / b).T
    d_emb = (d_s @ anchors) / tau
    grads = enc.backward_batch(params, cache, d_emb.astype(emb.dtype))
    return loss, grads
