"""Learnable sample selection: perturb, divide by relative distance, mask.

The functional API works on one object's ``d x d`` logit grid. The
``*_batch`` helpers do the same for a stack of grids ``(n, d, d)`` and are
what the training loop in :mod:`lss.bench` uses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_array, check_random_state, check_same_shape, check_temperature
from .gumbel import SoftMap, gumbel_softmax, sample_gumbel, softmax_vjp

WARMUP_ALL = "warmup_all"
LSS = "lss"
HARD_BINARIZED = "hard_binarized"
MODES = (WARMUP_ALL, LSS)

DEFAULT_GRID = 7


@dataclass(frozen=True)
class DividerResult:
    sorted_values: np.ndarray
    ratios: np.ndarray
    split_index: int
    order: np.ndarray  # flat cell indices, sorted_values[i] == soft.ravel()[order[i]]

    @property
    def positive_count(self):
        return self.split_index + 1


@dataclass(frozen=True)
class SampleMap:
    values: np.ndarray
    positive_count: int
    threshold_index: int
    mode: str
    soft: Optional[SoftMap] = None

    @property
    def mask(self):
        return self.values > 0


def _descending_order(keys):
    # Total order: larger key first, lower flat index first among equals.
    return np.argsort(-keys, axis=-1, kind="stable")


def relative_distance_divide(soft: SoftMap) -> DividerResult:
    """Split sorted soft-map values at the largest adjacent ratio.

    The ratio ``S_(i) / S_(i+1)`` equals ``exp((phi_(i) - phi_(i+1)) / tau)``
    on the perturbed logits, so the split is computed from logit gaps. That
    stays exact where the probabilities themselves would underflow. Ties on
    the largest ratio go to the later split (more positives); a grid with no
    gap at all keeps every cell.
    """
    flat = np.asarray(soft.values, dtype=np.float64).ravel()
    if flat.size < 2:
        raise ValueError("degenerate grid")
    keys = np.asarray(soft.perturbed, dtype=np.float64).ravel()
    order = _descending_order(keys)
    gaps = keys[order][:-1] - keys[order][1:]
    with np.errstate(over="ignore"):
        ratios = np.exp(gaps / soft.temperature)
    # no gap at all (every key equal): nothing separates, everything is kept
    split = flat.size - 1 if gaps.max() == 0 else int(np.flatnonzero(gaps == gaps.max())[-1])
    return DividerResult(sorted_values=flat[order], ratios=ratios, split_index=split, order=order)


def absolute_distance_divide(soft: SoftMap) -> int:
    """Positive count under the absolute-difference split ``S_(i) - S_(i+1)``.

    Reference rule the relative split is meant to improve on; ties go to the
    later split like :func:`relative_distance_divide`.
    """
    flat = np.asarray(soft.values, dtype=np.float64).ravel()
    if flat.size < 2:
        raise ValueError("degenerate grid")
    s = flat[_descending_order(flat)]
    diffs = s[:-1] - s[1:]
    if diffs.max() == 0:
        return flat.size
    return int(np.flatnonzero(diffs == diffs.max())[-1]) + 1


def build_sample_map(soft: SoftMap, divider: DividerResult, binarize=False) -> SampleMap:
    keep = divider.order[: divider.split_index + 1]
    flat = np.zeros(soft.values.size)
    flat[keep] = 1.0 if binarize else soft.values.ravel()[keep]
    return SampleMap(
        values=flat.reshape(soft.values.shape),
        positive_count=divider.positive_count,
        threshold_index=divider.split_index,
        mode=HARD_BINARIZED if binarize else LSS,
        soft=soft,
    )


def warmup_map(shape) -> SampleMap:
    values = np.ones(shape)
    return SampleMap(values=values, positive_count=values.size, threshold_index=values.size - 1, mode=WARMUP_ALL)


def select_train(logits, temperature=1.0, rng=None, mode=LSS, *, binarize=False, noise=None) -> SampleMap:
    """Training-time sample map for one object's logit grid.

    Draws fresh Gumbel noise from ``rng`` unless ``noise`` is given.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    tau = check_temperature(temperature)
    phi = check_array(logits, "logits")
    if mode == WARMUP_ALL:
        return warmup_map(phi.shape)
    if noise is None:
        noise = sample_gumbel(phi.shape, rng)
    soft = gumbel_softmax(phi, noise, tau)
    if phi.size == 1:
        return SampleMap(values=np.ones(phi.shape), positive_count=1, threshold_index=0, mode=mode, soft=soft)
    return build_sample_map(soft, relative_distance_divide(soft), binarize=binarize)


def select_infer(logits, preds):
    """Properties of the highest-logit cell; no noise, first cell wins ties.

    ``preds`` maps property names to arrays whose leading axes match the
    logit grid (e.g. ``depth (d, d)``, ``dims (d, d, 3)``).
    """
    phi = check_array(logits, "logits")
    flat = int(np.argmax(phi.ravel()))
    cell = np.unravel_index(flat, phi.shape)
    out = {"cell": tuple(int(c) for c in cell)}
    for name, value in preds.items():
        value = np.asarray(value)
        if value.shape[: phi.ndim] != phi.shape:
            raise ValueError(f"prediction {name!r} does not cover the logit grid")
        out[name] = value[cell]
    return out


def sample_map_grad(upstream, soft: SoftMap, sample_map: SampleMap):
    """Gradient w.r.t. the logits given ``upstream = dL/dSample_S``.

    Straight-through: thresholding (and binarisation) is treated as the
    identity on retained cells; cells zeroed by the map contribute nothing
    of their own, only through the softmax normaliser.
    """
    g = np.asarray(upstream, dtype=np.float64)
    check_same_shape(g, soft.values, names=("upstream", "soft map"))
    check_same_shape(sample_map.values, soft.values, names=("sample map", "soft map"))
    return softmax_vjp(np.where(sample_map.values > 0, g, 0.0), soft)


# -- batched versions -----------------------------------------------------


def softmax_batch(perturbed, temperature=1.0):
    """Softmax over all but the leading axis of ``(n, ...)``."""
    n = perturbed.shape[0]
    z = perturbed.reshape(n, -1) / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=1, keepdims=True)).reshape(perturbed.shape)


def divide_batch(perturbed):
    """Per-row split index and sort order for flattened ``(n, N)`` keys."""
    order = _descending_order(perturbed)
    k = np.take_along_axis(perturbed, order, axis=1)
    gaps = k[:, :-1] - k[:, 1:]
    # last occurrence of the row max: argmax on the reversed row
    rev = np.argmax(gaps[:, ::-1] == gaps.max(axis=1, keepdims=True), axis=1)
    split = np.where(gaps.max(axis=1) == 0, gaps.shape[1], gaps.shape[1] - 1 - rev)
    return split, order


def select_train_batch(logits, temperature=1.0, rng=None, mode=LSS, *, binarize=False, noise=None):
    """Sample maps and soft maps for a stack of logit grids.

    Returns ``(maps, soft)`` with the shape of ``logits``; ``soft`` is
    ``None`` in warm-up mode.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    tau = check_temperature(temperature)
    phi = np.asarray(logits, dtype=np.float64)
    if mode == WARMUP_ALL:
        return np.ones_like(phi), None
    if noise is None:
        noise = sample_gumbel(phi.shape, rng).values
    perturbed = phi + noise
    soft = softmax_batch(perturbed, tau)
    n = phi.shape[0]
    flat_soft = soft.reshape(n, -1)
    maps = np.zeros_like(flat_soft)
    if flat_soft.shape[1] == 1:
        maps[:] = 1.0
    else:
        split, order = divide_batch(perturbed.reshape(n, -1))
        rank = np.empty_like(order)
        np.put_along_axis(rank, order, np.arange(order.shape[1])[None, :].repeat(n, 0), axis=1)
        keep = rank <= split[:, None]
        maps = np.where(keep, 1.0 if binarize else flat_soft, 0.0)
    return maps.reshape(phi.shape), soft


def sample_map_grad_batch(upstream, soft, maps, temperature=1.0):
    n = soft.shape[0]
    g = np.where(maps > 0, upstream, 0.0).reshape(n, -1)
    s = soft.reshape(n, -1)
    return (s * (g - np.sum(g * s, axis=1, keepdims=True)) / temperature).reshape(soft.shape)


class LearnableSampleSelector(TransformerMixin, BaseEstimator):
    """Turn stacks of logit grids into training sample maps.

    Parameters
    ----------
    temperature : float, default=1.0
    mode : {"lss", "warmup_all"}, default="lss"
    binarize : bool, default=False
        Set retained cells to 1 instead of keeping their soft values.
    random_state : int, Generator or None
        Source of the Gumbel noise. A fresh draw is made on every
        ``transform`` call.
    """

    def __init__(self, temperature=1.0, mode=LSS, binarize=False, random_state=None):
        self.temperature = temperature
        self.mode = mode
        self.binarize = binarize
        self.random_state = random_state

    def fit(self, X, y=None):
        X = self._check_grids(X)
        check_temperature(self.temperature)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.grid_shape_ = X.shape[1:]
        self.n_features_in_ = int(np.prod(self.grid_shape_))
        self._rng = check_random_state(self.random_state)
        return self

    def transform(self, X):
        check_is_fitted(self, "grid_shape_")
        X = self._check_grids(X)
        if X.shape[1:] != self.grid_shape_:
            raise ValueError(f"expected grids of shape {self.grid_shape_}, got {X.shape[1:]}")
        maps, _ = select_train_batch(X, self.temperature, self._rng, self.mode, binarize=self.binarize)
        return maps

    def select(self, X):
        """Flat index of the inference cell (noise-free argmax) per grid."""
        X = self._check_grids(X)
        return np.argmax(X.reshape(X.shape[0], -1), axis=1)

    @staticmethod
    def _check_grids(X):
        X = check_array(X, "X")
        if X.ndim == 2:
            X = X[None]
        if X.ndim != 3:
            raise ValueError(f"X must have shape (n, d, d), got {X.shape}")
        return X
