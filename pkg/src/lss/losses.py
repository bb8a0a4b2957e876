"""3D property losses, sample-map masking and the warm-up gate.

Every differentiable loss here has a matching ``*_grad`` that returns the
hand-derived gradient with respect to the predictions; :mod:`lss.gradcheck`
keeps them honest against finite differences.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._validation import check_same_shape
from .gumbel import SoftMap
from .selection import LSS, WARMUP_ALL, SampleMap

SQRT2 = math.sqrt(2.0)
NUM_BINS = 12
BIN_WIDTH = 2.0 * math.pi / NUM_BINS
SMOOTH_L1_BETA = 1.0


def _finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite input")


# -- depth ----------------------------------------------------------------


def depth_loss(d_pred, u, d_gt):
    """Laplacian aleatoric loss ``sqrt(2) * exp(-u) * |d_gt - d_pred| + u``.

    ``u`` is the log of the Laplace scale. Broadcasts over arrays.
    """
    d_pred, u, d_gt = (np.asarray(v, dtype=np.float64) for v in (d_pred, u, d_gt))
    _finite(d_pred, u, d_gt)
    if np.any(d_gt <= 0):
        raise ValueError("ground-truth depth must be positive")
    return SQRT2 * np.exp(-u) * np.abs(d_gt - d_pred) + u


def depth_loss_grad(d_pred, u, d_gt):
    """``(dL/dd_pred, dL/du)``; the subgradient at ``d_pred == d_gt`` is 0."""
    d_pred, u, d_gt = (np.asarray(v, dtype=np.float64) for v in (d_pred, u, d_gt))
    err = d_pred - d_gt
    w = SQRT2 * np.exp(-u)
    return w * np.sign(err), 1.0 - w * np.abs(err)


# -- orientation ----------------------------------------------------------


def bin_centers():
    return -math.pi + (2 * np.arange(NUM_BINS) + 1) * math.pi / NUM_BINS


def wrap_angle(theta):
    """Wrap into ``[-pi, pi)``."""
    return np.mod(np.asarray(theta, dtype=np.float64) + math.pi, 2 * math.pi) - math.pi


def assign_bin(theta):
    """Bin index and residual ``theta - center`` in ``(-w/2, w/2]``.

    Bins are the half-open arcs ``(c - w/2, c + w/2]``; together they tile the
    circle, so an angle exactly on an edge belongs to the lower bin.
    """
    t = wrap_angle(theta)
    k = np.mod(np.ceil((t + math.pi) / BIN_WIDTH).astype(int) - 1, NUM_BINS)
    return k, wrap_angle(t - bin_centers()[k])


def _log_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def multibin_orientation_loss(bins, theta_gt):
    """Bin cross-entropy plus L1 on the residual of the ground-truth bin.

    ``bins`` has shape ``(..., 12, 2)``: confidence logit, residual (rad).
    """
    bins = np.asarray(bins, dtype=np.float64)
    _finite(bins, theta_gt)
    if bins.shape[-2:] != (NUM_BINS, 2):
        raise ValueError(f"bins must end in ({NUM_BINS}, 2), got {bins.shape}")
    k, res = assign_bin(theta_gt)
    k = np.broadcast_to(k, bins.shape[:-2])
    res = np.broadcast_to(res, bins.shape[:-2])
    logp = _log_softmax(bins[..., 0])
    ce = -np.take_along_axis(logp, k[..., None], axis=-1)[..., 0]
    r = np.take_along_axis(bins[..., 1], k[..., None], axis=-1)[..., 0]
    return ce + np.abs(r - res)


def multibin_orientation_grad(bins, theta_gt):
    bins = np.asarray(bins, dtype=np.float64)
    k, res = assign_bin(theta_gt)
    k = np.broadcast_to(k, bins.shape[:-2])
    res = np.broadcast_to(res, bins.shape[:-2])
    onehot = np.eye(NUM_BINS)[k]
    grad = np.zeros_like(bins)
    grad[..., 0] = np.exp(_log_softmax(bins[..., 0])) - onehot
    r = np.take_along_axis(bins[..., 1], k[..., None], axis=-1)[..., 0]
    grad[..., 1] = onehot * np.sign(r - res)[..., None]
    return grad


def decode_orientation(bins):
    """Yaw from the most confident bin and its residual."""
    bins = np.asarray(bins, dtype=np.float64)
    k = np.argmax(bins[..., 0], axis=-1)
    r = np.take_along_axis(bins[..., 1], k[..., None], axis=-1)[..., 0]
    return wrap_angle(bin_centers()[k] + r)


# -- dimensions and offset ------------------------------------------------


def dim_loss(pred, gt):
    """L1 over ``(h, w, l)``, last axis."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    _finite(pred, gt)
    return np.abs(pred - gt).sum(axis=-1)


def dim_loss_grad(pred, gt):
    return np.sign(np.asarray(pred, dtype=np.float64) - gt)


def offset_loss(pred, gt, beta=SMOOTH_L1_BETA):
    """Smooth-L1 summed over ``(du, dv)``: ``x^2 / (2 beta)`` below ``beta``."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    _finite(pred, gt)
    x = np.abs(pred - gt)
    return np.where(x < beta, 0.5 * x * x / beta, x - 0.5 * beta).sum(axis=-1)


def offset_loss_grad(pred, gt, beta=SMOOTH_L1_BETA):
    x = np.asarray(pred, dtype=np.float64) - gt
    return np.where(np.abs(x) < beta, x / beta, np.sign(x))


# -- per-object composition -----------------------------------------------


@dataclass
class CellPredictions:
    depth: np.ndarray  # (d, d) metres
    log_uncertainty: np.ndarray  # (d, d)
    dims: np.ndarray  # (d, d, 3) metres
    orientation: np.ndarray  # (d, d, 12, 2)
    offset: np.ndarray  # (2,) pixels

    def __post_init__(self):
        for name in ("depth", "log_uncertainty", "dims", "orientation", "offset"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        grid = self.depth.shape
        if (
            self.log_uncertainty.shape != grid
            or self.dims.shape != grid + (3,)
            or self.orientation.shape != grid + (NUM_BINS, 2)
            or self.offset.shape != (2,)
        ):
            raise ValueError("inconsistent prediction shapes")

    def as_dict(self):
        return {
            "depth": self.depth,
            "log_uncertainty": self.log_uncertainty,
            "dims": self.dims,
            "orientation": self.orientation,
        }


@dataclass(frozen=True)
class ObjectTarget:
    depth: float
    dims: tuple
    yaw: float
    offset: tuple = (0.0, 0.0)


@dataclass
class LossBreakdown:
    depth: np.ndarray
    dims: np.ndarray
    orientation: np.ndarray
    offset: float
    total: Optional[float] = None

    def to_record(self, **extra):
        rec = dict(extra)
        rec.update(
            depth=float(np.sum(self.depth)),
            dims=float(np.sum(self.dims)),
            orientation=float(np.sum(self.orientation)),
            offset=float(self.offset),
        )
        if self.total is not None:
            rec["total"] = float(self.total)
        return rec

    def to_json(self, **extra):
        return json.dumps(self.to_record(**extra), sort_keys=True)


def compute_breakdown(preds: CellPredictions, target: ObjectTarget) -> LossBreakdown:
    return LossBreakdown(
        depth=depth_loss(preds.depth, preds.log_uncertainty, target.depth),
        dims=dim_loss(preds.dims, np.asarray(target.dims)),
        orientation=multibin_orientation_loss(preds.orientation, target.yaw),
        offset=float(offset_loss(preds.offset, np.asarray(target.offset))),
    )


def _map_values(sample_map):
    return sample_map.values if isinstance(sample_map, SampleMap) else np.asarray(sample_map, dtype=np.float64)


def masked_total_loss(breakdown: LossBreakdown, sample_map, normalize=True):
    """``offset + sum(map * (depth + dims + orientation))``.

    With ``normalize`` the masked sum is divided by ``sum(map)``; an all-zero
    map contributes nothing.
    """
    m = _map_values(sample_map)
    cell = breakdown.depth + breakdown.dims + breakdown.orientation
    check_same_shape(cell, m, names=("loss grid", "sample map"))
    masked = float(np.sum(m * cell))
    if normalize:
        mass = float(np.sum(m))
        masked = masked / mass if mass > 0 else 0.0
    total = breakdown.offset + masked
    breakdown.total = total
    return total


def masked_total_grad(breakdown: LossBreakdown, sample_map, normalize=True):
    """``(dT/d cell_loss, dT/d map)`` on the grid; ``dT/d offset`` is 1."""
    m = _map_values(sample_map)
    cell = breakdown.depth + breakdown.dims + breakdown.orientation
    check_same_shape(cell, m, names=("loss grid", "sample map"))
    if not normalize:
        return m.copy(), np.where(m > 0, cell, 0.0)
    mass = float(np.sum(m))
    if mass <= 0:
        return np.zeros_like(m), np.zeros_like(m)
    mean = float(np.sum(m * cell)) / mass
    return m / mass, np.where(m > 0, (cell - mean) / mass, 0.0)


def loss_and_grads(preds: CellPredictions, target: ObjectTarget, sample_map, *, soft: Optional[SoftMap] = None, normalize=True):
    """Masked total and its gradient for every prediction tensor.

    If ``soft`` is given (LSS mode) the gradient also flows into the logits
    through the straight-through sample map; it is returned under
    ``"logits"``.
    """
    from .selection import sample_map_grad

    bd = compute_breakdown(preds, target)
    total = masked_total_loss(bd, sample_map, normalize)
    w, dmap = masked_total_grad(bd, sample_map, normalize)
    dd, du = depth_loss_grad(preds.depth, preds.log_uncertainty, target.depth)
    grads = {
        "depth": w * dd,
        "log_uncertainty": w * du,
        "dims": w[..., None] * dim_loss_grad(preds.dims, np.asarray(target.dims)),
        "orientation": w[..., None, None] * multibin_orientation_grad(preds.orientation, target.yaw),
        "offset": offset_loss_grad(preds.offset, np.asarray(target.offset)),
    }
    if soft is not None:
        sm = sample_map if isinstance(sample_map, SampleMap) else SampleMap(_map_values(sample_map), 0, 0, LSS)
        grads["logits"] = sample_map_grad(dmap, soft, sm)
    return total, bd, grads


# -- warm-up --------------------------------------------------------------


@dataclass
class TrainState:
    epoch: int
    total_epochs: int
    warmup_fraction: float = 0.3
    depth_loss_history: deque = field(default_factory=lambda: deque(maxlen=64))

    def __post_init__(self):
        if not 0 <= self.epoch <= self.total_epochs:
            raise ValueError(f"epoch {self.epoch} outside [0, {self.total_epochs}]")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")

    def record_depth_loss(self, value):
        self.depth_loss_history.append(float(value))


def warmup_epochs(total_epochs, warmup_fraction=0.3):
    # round() first: 0.3 * 10 is 3.0000000000000004 in floating point
    return math.ceil(round(warmup_fraction * total_epochs, 9))


def warmup_gate(state: TrainState):
    """``"warmup_all"`` while ``epoch < ceil(fraction * total)``, else ``"lss"``."""
    if state.epoch < warmup_epochs(state.total_epochs, state.warmup_fraction):
        return WARMUP_ALL
    return LSS


def depth_loss_stabilization(history, window=5):
    """Relative change between the last two ``window``-epoch means.

    Reported alongside the gate, never used to switch it. ``None`` until
    ``2 * window`` epochs have been recorded.
    """
    h = list(history)
    if len(h) < 2 * window:
        return None
    recent = float(np.mean(h[-window:]))
    previous = float(np.mean(h[-2 * window : -window]))
    return abs(recent - previous) / max(abs(previous), 1e-12)
