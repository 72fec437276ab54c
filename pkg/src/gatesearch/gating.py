"""Per-channel binary gates with a softmax gradient surrogate.

Each gate holds two logits ``(psi_on, psi_off)``. The forward decision is the
hard indicator ``psi_on > psi_off`` (ties break to off); gradients flow
through the softmax probability of the "on" logit, so closed channels keep
receiving learning signal and can reopen. The ``gamma_*`` functions turn
gate vectors into differentiable channel counts for the resource model:
``gamma_op`` counts one operation's open channels, ``gamma_layer`` counts
channels open in at least one operation of a layer (the union binarizer acts
as identity in the backward pass).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor, accumulate_grad, make_node

__all__ = [
    "GatePair", "GateVector", "GateSGD",
    "gate_forward", "gate_surrogate", "gate_backward",
    "gamma_op", "gamma_op_relaxed", "gamma_layer", "gamma_layer_relaxed",
    "mask_channels", "GRAD_VARIANTS",
]

GRAD_VARIANTS = ("binary", "surrogate")


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


@dataclass
class GatePair:
    """A single channel's gate logits and their accumulated gradients."""

    psi_on: float
    psi_off: float
    grad_on: float = 0.0
    grad_off: float = 0.0


def gate_forward(gate: GatePair) -> float:
    """Hard decision: 1.0 iff psi_on strictly exceeds psi_off."""
    return 1.0 if gate.psi_on > gate.psi_off else 0.0


def gate_surrogate(gate: GatePair) -> float:
    """Softmax probability of the "on" logit, i.e. sigmoid(psi_on - psi_off)."""
    return float(_sigmoid(np.float64(gate.psi_on) - np.float64(gate.psi_off)))


def gate_backward(gate: GatePair, upstream: float) -> tuple[float, float]:
    """Gradient of the surrogate w.r.t. both logits, scaled by ``upstream``.

    With s = sigmoid(psi_on - psi_off): d/d_on = s(1-s), d/d_off = -s(1-s).
    The result is also accumulated into the pair's grad fields.
    """
    s = gate_surrogate(gate)
    d = upstream * s * (1.0 - s)
    gate.grad_on += d
    gate.grad_off -= d
    return d, -d


class GateVector:
    """Gate logits for every output channel of one candidate operation."""

    def __init__(self, size: int, owner=(-1, -1), psi_on: float = 1.0, psi_off: float = 0.0):
        self.psi_on = np.full(size, psi_on, dtype=np.float64)
        self.psi_off = np.full(size, psi_off, dtype=np.float64)
        self.grad_on = np.zeros(size, dtype=np.float64)
        self.grad_off = np.zeros(size, dtype=np.float64)
        self.owner = tuple(owner)
        self.frozen = False

    def __len__(self):
        return self.psi_on.shape[0]

    def decisions(self) -> np.ndarray:
        return (self.psi_on > self.psi_off).astype(np.float64)

    def surrogate(self) -> np.ndarray:
        return _sigmoid(self.psi_on - self.psi_off)

    def active_count(self) -> int:
        return int(np.count_nonzero(self.psi_on > self.psi_off))

    def pair(self, channel: int) -> GatePair:
        return GatePair(float(self.psi_on[channel]), float(self.psi_off[channel]))

    def accumulate(self, upstream: np.ndarray) -> None:
        """Route per-channel upstream gradients through the surrogate."""
        if self.frozen:
            return
        s = self.surrogate()
        d = upstream * s * (1.0 - s)
        self.grad_on += d
        self.grad_off -= d

    def zero_grad(self) -> None:
        self.grad_on[...] = 0.0
        self.grad_off[...] = 0.0

    def set_pattern(self, mask) -> None:
        """Force decisions to a boolean pattern (used by tests and tools)."""
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != self.psi_on.shape:
            raise DimensionError(f"pattern shape {mask.shape} != gate size {self.psi_on.shape}")
        self.psi_on = np.where(mask, 1.0, -1.0).astype(np.float64)
        self.psi_off = np.zeros_like(self.psi_on)


def _check_same_length(vectors):
    sizes = {len(v) for v in vectors}
    if len(sizes) > 1:
        raise ConfigError(f"gate vectors must share one channel count, got sizes {sorted(sizes)}")


def gamma_op(vec: GateVector) -> Tensor:
    """Differentiable count of an operation's open channels.

    Forward is the integer number of open gates; backward routes the upstream
    scalar to every channel through the surrogate derivative.
    """
    value = np.float64(vec.active_count())

    def bw(g):
        vec.accumulate(np.full(len(vec), float(g)))

    return make_node(value, (), bw, force_grad=not vec.frozen)


def gamma_op_relaxed(vec: GateVector) -> Tensor:
    """Soft channel count: sum of surrogates, with the same backward rule."""
    value = np.float64(vec.surrogate().sum())

    def bw(g):
        vec.accumulate(np.full(len(vec), float(g)))

    return make_node(value, (), bw, force_grad=not vec.frozen)


def gamma_layer(vectors, skip_vectors=None) -> Tensor:
    """Differentiable count of channels open in at least one operation.

    ``skip_vectors`` contributes the gate vectors of a skip source feeding the
    same downstream layer. The forward union binarizer is treated as identity
    in the backward pass, so every contributing gate receives gradient.
    """
    vectors = list(vectors)
    all_vecs = vectors + list(skip_vectors or [])
    _check_same_length(all_vecs)
    union = np.zeros(len(all_vecs[0]), dtype=bool)
    for v in all_vecs:
        union |= v.psi_on > v.psi_off
    value = np.float64(union.sum())

    def bw(g):
        for v in all_vecs:
            v.accumulate(np.full(len(v), float(g)))

    trainable = any(not v.frozen for v in all_vecs)
    return make_node(value, (), bw, force_grad=trainable)


def gamma_layer_relaxed(vectors, skip_vectors=None) -> Tensor:
    """Soft union count: sum of every contributing surrogate."""
    vectors = list(vectors)
    all_vecs = vectors + list(skip_vectors or [])
    _check_same_length(all_vecs)
    value = np.float64(sum(v.surrogate().sum() for v in all_vecs))

    def bw(g):
        for v in all_vecs:
            v.accumulate(np.full(len(v), float(g)))

    trainable = any(not v.frozen for v in all_vecs)
    return make_node(value, (), bw, force_grad=trainable)


def mask_channels(x: Tensor, vec: GateVector, grad_variant: str = "binary") -> Tensor:
    """Multiply an NCHW tensor by the per-channel binary gate mask.

    The gradient reaching the gates is the upstream gradient contracted with
    the unmasked operation output over (N, H, W). ``grad_variant`` picks the
    multiplier for the feature-path gradient: the forward binary mask
    (default) or the softmax surrogate.
    """
    if grad_variant not in GRAD_VARIANTS:
        raise ConfigError(f"grad_variant must be one of {GRAD_VARIANTS}, got {grad_variant!r}")
    xd = x.data
    if xd.ndim != 4:
        raise DimensionError(f"mask_channels expects NCHW input, got shape {xd.shape}")
    if xd.shape[1] != len(vec):
        raise ConfigError(f"gate vector has {len(vec)} channels, tensor has {xd.shape[1]}")
    m = vec.decisions().astype(xd.dtype)
    out = xd * m[None, :, None, None]

    def bw(g):
        if x.requires_grad:
            mult = m if grad_variant == "binary" else vec.surrogate().astype(xd.dtype)
            accumulate_grad(x, g * mult[None, :, None, None])
        vec.accumulate((g * xd).sum(axis=(0, 2, 3)).astype(np.float64))

    return make_node(out, (x,), bw, force_grad=not vec.frozen)


class GateSGD:
    """Plain gradient descent on gate logits (no momentum, no weight decay)."""

    def __init__(self, vectors, lr):
        if lr <= 0:
            raise ConfigError(f"gate learning rate must be > 0, got {lr}")
        self.vectors = list(vectors)
        self.lr = float(lr)

    def step(self):
        for v in self.vectors:
            if v.frozen:
                continue
            v.psi_on -= self.lr * v.grad_on
            v.psi_off -= self.lr * v.grad_off

    def zero_grad(self):
        for v in self.vectors:
            v.zero_grad()
