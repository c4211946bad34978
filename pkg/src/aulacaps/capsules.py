"""Capsule primitives: squash, primary capsules, vote transforms and routing-by-agreement.

Capsule tensors are laid out as ``(batch, count, dim)``; unbatched
``(count, dim)`` inputs are accepted wherever it makes sense.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor, record
from .layers import Module

SQUASH_EPS = 1e-9
PAPER_SPATIAL_CAPSULES = 576
PAPER_TEMPORAL_CAPSULES = 864
CAPSULE_DIM = 16


@dataclass
class CapsuleSet:
    caps: Tensor

    @property
    def count(self) -> int:
        return self.caps.shape[-2]

    @property
    def dim(self) -> int:
        return self.caps.shape[-1]

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.caps.data.astype(np.float64), axis=-1)


@dataclass
class RoutingState:
    votes: np.ndarray
    logits: np.ndarray
    couplings: np.ndarray
    outputs: CapsuleSet
    iterations: int
    coupling_history: list[np.ndarray] = field(default_factory=list)


def _squash_np(s: np.ndarray) -> np.ndarray:
    sq = (s * s).sum(axis=-1, keepdims=True)
    n = np.sqrt(sq + SQUASH_EPS)
    scale = np.where(sq > 0, n / (1.0 + n * n), 0.0).astype(s.dtype)
    return s * scale


def squash(s) -> Tensor:
    """v = (|s|^2 / (1 + |s|^2)) * s / |s| along the last axis; 0 maps to 0."""

    def fwd(x):
        sq = (x * x).sum(axis=-1, keepdims=True)
        nz = sq > 0
        n = np.sqrt(sq + SQUASH_EPS)
        f = np.where(nz, n / (1.0 + n * n), 0.0).astype(x.dtype)
        # d f(n)/dn / n, with f(n) = n / (1 + n^2)
        fp_over_n = np.where(nz, (1.0 - n * n) / ((1.0 + n * n) ** 2 * n), 0.0).astype(x.dtype)

        def bwd(g):
            return (f * g + x * fp_over_n * (x * g).sum(axis=-1, keepdims=True),)

        return x * f, bwd

    return record("squash", (s,), fwd)


def capsule_lengths(caps) -> Tensor:
    """Euclidean norm of each capsule; the gradient at the zero capsule is 0."""

    def fwd(x):
        n = np.sqrt((x * x).sum(axis=-1))
        safe = np.where(n > 0, n, 1.0)

        def bwd(g):
            return (np.where((n > 0)[..., None], x / safe[..., None], 0.0).astype(x.dtype) * g[..., None],)

        return n, bwd

    return record("capsule_length", (caps,), fwd)


def primary_capsules(features, dim: int = CAPSULE_DIM, expected_count: int | None = None) -> Tensor:
    """Reshape a channel-first feature map into squashed capsules.

    Channels are grouped into capsule types of ``dim`` consecutive channels;
    capsules are ordered position-major, then by type.
    """
    features = ad.as_tensor(features)
    per_sample = int(np.prod(features.shape[1:]))
    if features.shape[1] % dim:
        raise ShapeError("primary_capsules", features.shape, (dim,))
    count = per_sample // dim
    if expected_count is not None and count != expected_count:
        raise ShapeError("primary_capsules", features.shape, (expected_count, dim))
    nd = features.ndim
    channel_last = ad.transpose(features, (0,) + tuple(range(2, nd)) + (1,))
    return squash(ad.reshape(channel_last, (features.shape[0], count, dim)))


def primary_capsules_2d(features) -> Tensor:
    """Spatial primary capsules: (B, 64, 12, 12) features -> (B, 576, 16)."""
    f = ad.as_tensor(features)
    if int(np.prod(f.shape[1:])) != PAPER_SPATIAL_CAPSULES * CAPSULE_DIM:
        raise ShapeError("primary_capsules_2d", f.shape, (PAPER_SPATIAL_CAPSULES * CAPSULE_DIM,))
    return primary_capsules(f, CAPSULE_DIM, PAPER_SPATIAL_CAPSULES)


def primary_capsules_3d(features) -> Tensor:
    """Spatio-temporal primary capsules: (B, 96, 1, 12, 12) features -> (B, 864, 16)."""
    f = ad.as_tensor(features)
    if int(np.prod(f.shape[1:])) != PAPER_TEMPORAL_CAPSULES * CAPSULE_DIM:
        raise ShapeError("primary_capsules_3d", f.shape, (PAPER_TEMPORAL_CAPSULES * CAPSULE_DIM,))
    return primary_capsules(f, CAPSULE_DIM, PAPER_TEMPORAL_CAPSULES)


def concat_capsules(a, b) -> Tensor:
    """Concatenate along the capsule axis, ``a`` first."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError("concat_capsules", a.shape, b.shape)
    if a.shape[-2] == 0:
        return b
    if b.shape[-2] == 0:
        return a
    return ad.concat([a, b], axis=-2)


class VoteTransform(Module):
    """Per-(input, output) linear maps W[i, j] : R^in_dim -> R^out_dim."""

    def __init__(self, in_count, out_count, out_dim, in_dim, rng: np.random.Generator, std=None):
        super().__init__()
        if std is None:
            # |s_j| ~ 1.5 |u| at init under uniform couplings
            std = 1.5 * out_count / np.sqrt(in_count * out_dim)
        w = rng.standard_normal((in_count, out_count, out_dim, in_dim)) * std
        self.W = Tensor(w.astype(ad.DEFAULT_DTYPE), requires_grad=True)

    @property
    def in_count(self) -> int:
        return self.W.shape[0]

    @property
    def out_count(self) -> int:
        return self.W.shape[1]

    def forward(self, u) -> Tensor:
        return ad.einsum("ijdk,bik->bijd", self.W, u)


def _softmax(b: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(b - b.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


_pinned: list[np.ndarray] = []


@contextmanager
def pinned_couplings(couplings: np.ndarray):
    """Use fixed final-iteration couplings in every ``route`` call inside the block.

    Routing differentiates with the couplings held constant; finite-difference
    checks pin them so the numeric oracle sees the same function.
    """
    _pinned.append(np.asarray(couplings))
    try:
        yield
    finally:
        _pinned.pop()


def route(u, W, iterations: int = 3):
    """Dynamic routing-by-agreement from ``u`` (B, I, in_dim) to J output capsules.

    ``W`` is a :class:`VoteTransform` or its (I, J, out_dim, in_dim) weight tensor.
    Coupling logits start at zero; the couplings are treated as constants so the
    gradient flows through the votes of the final iteration only.
    """
    if iterations < 1:
        raise ValueError(f"routing needs at least one iteration, got {iterations}")
    weight = W.W if isinstance(W, VoteTransform) else ad.as_tensor(W)
    u = ad.as_tensor(u)
    unbatched = u.ndim == 2
    if unbatched:
        u = ad.reshape(u, (1,) + u.shape)
    if u.shape[1] != weight.shape[0] or u.shape[2] != weight.shape[3]:
        raise ShapeError("route", u.shape, weight.shape)
    u_hat = ad.einsum("ijdk,bik->bijd", weight, u)  # (B, I, J, D)
    uh = u_hat.data
    b = np.zeros(uh.shape[:3], dtype=uh.dtype)
    history = []
    v = None
    for r in range(iterations):
        c = _softmax(b, axis=2)
        history.append(c)
        if r == iterations - 1:
            if _pinned:
                c = _pinned[-1].astype(uh.dtype).reshape(c.shape)
            s = ad.einsum("bij,bijd->bjd", Tensor(c, dtype=c.dtype), u_hat)
            v = squash(s)
        else:
            v_np = _squash_np(np.einsum("bij,bijd->bjd", c, uh))
            b = b + np.einsum("bijd,bjd->bij", uh, v_np)
    if unbatched:
        v = ad.reshape(v, v.shape[1:])
    state = RoutingState(
        votes=uh, logits=b, couplings=history[-1], outputs=CapsuleSet(v),
        iterations=iterations, coupling_history=history,
    )
    return v, state


def mask_by_label(caps, y) -> Tensor:
    """Zero capsules whose label bit is 0 and flatten row-major: (B, J, D) -> (B, J*D)."""
    caps = ad.as_tensor(caps)
    y = np.asarray(y.data if isinstance(y, Tensor) else y)
    unbatched = caps.ndim == 2
    if unbatched:
        caps = ad.reshape(caps, (1,) + caps.shape)
        y = y.reshape(1, -1)
    if y.shape[-1] != caps.shape[-2]:
        raise ShapeError("mask_by_label", caps.shape, y.shape)
    mask = Tensor(y.astype(caps.dtype)[..., None], dtype=caps.dtype)
    flat = ad.reshape(caps * mask, (caps.shape[0], caps.shape[1] * caps.shape[2]))
    return ad.reshape(flat, (flat.shape[1],)) if unbatched else flat
