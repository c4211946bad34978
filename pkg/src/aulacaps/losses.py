"""Weighted margin loss, occurrence-rate class weights, reconstruction and combined objectives."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

log = logging.getLogger(__name__)

AU_COUNT = 12


@dataclass
class LossConfig:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lambda_au: float = 0.5
    lambda_d: float = 0.05
    weights: np.ndarray = field(default_factory=lambda: np.ones(AU_COUNT))

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not 0 < self.m_minus < self.m_plus < 1:
            raise ValueError(f"margins must satisfy 0 < m- < m+ < 1, got {self.m_minus}, {self.m_plus}")
        if np.any(self.weights < 0):
            raise ValueError("class weights must be non-negative")


def class_weights(rates, num_frames: int | None = None) -> np.ndarray:
    """w_i = (1/r_i) * N / sum_j (1/r_j) over the N given occurrence rates.

    A zero rate makes the formula undefined. When ``num_frames`` is given, zero
    rates are clamped to ``1 / (2 * num_frames)`` with a warning; otherwise a
    ValueError names the offending entries.
    """
    r = np.asarray(rates, dtype=np.float64)
    bad = np.flatnonzero(r <= 0)
    if bad.size:
        if num_frames is None or np.any(r[bad] < 0):
            raise ValueError(
                f"occurrence rates at {bad.tolist()} are not positive; pass num_frames to clamp "
                "them to 1/(2*num_frames)"
            )
        floor = 1.0 / (2.0 * num_frames)
        log.warning("clamping zero occurrence rates at %s to %.3g", bad.tolist(), floor)
        r = r.copy()
        r[bad] = floor
    inv = 1.0 / r
    return inv * r.size / inv.sum()


def occurrence_rates(labels) -> np.ndarray:
    """Fraction of frames in which each AU is active."""
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.shape[0] == 0:
        raise ValueError(f"labels must be a non-empty (frames, aus) array, got {labels.shape}")
    return labels.mean(axis=0)


def margin_loss(p, T, cfg: LossConfig | None = None, reduce: str = "mean") -> Tensor:
    """Class-weighted margin loss summed over AUs.

    ``p`` is (B, J) or (J,) capsule lengths, ``T`` the matching binary labels.
    Batched inputs are averaged over samples unless ``reduce="none"``.
    """
    cfg = cfg or LossConfig()
    p = ad.as_tensor(p)
    T = np.asarray(T.data if isinstance(T, Tensor) else T, dtype=p.dtype)
    if T.shape != p.shape or cfg.weights.shape[-1] != p.shape[-1]:
        raise ShapeError("margin_loss", p.shape, T.shape, cfg.weights.shape)
    dt = p.dtype
    w = Tensor(cfg.weights.astype(dt), dtype=dt)
    pos = ad.clip_min(Tensor(np.asarray(cfg.m_plus, dt), dtype=dt) - p, 0.0) ** 2
    neg = ad.clip_min(p - Tensor(np.asarray(cfg.m_minus, dt), dtype=dt), 0.0) ** 2
    per_au = Tensor(T, dtype=dt) * pos + Tensor((cfg.lambda_au * (1 - T)).astype(dt), dtype=dt) * neg
    per_sample = ad.tsum(w * per_au, axis=-1)
    if p.ndim == 1 or reduce == "none":
        return per_sample
    return ad.mean(per_sample)


def reconstruction_loss(x_r, x_gen) -> Tensor:
    """Mean of squared elementwise differences."""
    x_r, x_gen = ad.as_tensor(x_r), ad.as_tensor(x_gen)
    if x_r.shape != x_gen.shape:
        raise ShapeError("reconstruction_loss", x_r.shape, x_gen.shape)
    diff = x_gen - x_r
    return ad.mean(diff * diff)


def total_loss(margin, rec, cfg: LossConfig | None = None):
    """margin + lambda_d * rec; works on Tensors and plain floats alike."""
    cfg = cfg or LossConfig()
    return margin + rec * cfg.lambda_d
