"""Gumbel noise and the Gumbel-Max / Gumbel-Softmax / Gumbel-Top-k primitives.

Every sampler takes its random generator explicitly; nothing here touches
global RNG state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._validation import check_array, check_random_state, check_same_shape, check_temperature

#: Uniform draws are clamped into ``[EPS, 1 - EPS]`` before the double log.
EPS = 1e-12


@dataclass(frozen=True)
class GumbelNoise:
    values: np.ndarray
    seed: Optional[int] = None

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class SoftMap:
    """Temperature-scaled softmax over a perturbed logit grid.

    ``perturbed`` keeps the logits + noise that produced ``values`` so that
    downstream code can work with exact log-ratios instead of dividing
    probabilities that may have underflowed.
    """

    values: np.ndarray
    temperature: float
    perturbed: np.ndarray

    @property
    def shape(self):
        return self.values.shape


def gumbel_from_uniform(u):
    """Inverse-transform ``u`` ~ U(0, 1) into standard Gumbel samples."""
    u = np.clip(np.asarray(u, dtype=np.float64), EPS, 1.0 - EPS)
    return -np.log(-np.log(u))


def sample_gumbel(shape, rng=None) -> GumbelNoise:
    """Draw i.i.d. standard Gumbel noise of the given shape."""
    shape = tuple(int(n) for n in np.atleast_1d(shape))
    if len(shape) == 0 or int(np.prod(shape)) < 1:
        raise ValueError(f"shape must be non-empty, got {shape}")
    seed = int(rng) if isinstance(rng, (int, np.integer)) else None
    gen = check_random_state(rng)
    return GumbelNoise(gumbel_from_uniform(gen.random(shape)), seed=seed)


def _noise_values(noise, shape):
    if noise is None:
        return np.zeros(shape)
    vals = noise.values if isinstance(noise, GumbelNoise) else np.asarray(noise, dtype=np.float64)
    check_same_shape(vals, np.empty(shape), names=("noise", "logits"))
    return vals


def softmax(x, temperature=1.0):
    """Max-shifted softmax over all entries of ``x`` (flattened)."""
    z = np.asarray(x, dtype=np.float64) / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def gumbel_max(logits, rng=None, *, size=None, noise=None):
    """Index of ``argmax(logits + G)``; distributed as ``softmax(logits)``.

    With ``size`` the draw is repeated ``size`` times and an int array is
    returned. ``noise`` pins the perturbation (only valid without ``size``).
    """
    phi = np.asarray(logits, dtype=np.float64)
    if phi.size == 0:
        raise ValueError("empty logits")
    grid_shape = phi.shape
    phi = check_array(phi.ravel(), "logits")
    if size is None:
        g = _noise_values(noise, grid_shape).ravel() if noise is not None else sample_gumbel(phi.shape, rng).values
        return int(np.argmax(phi + g))
    if noise is not None:
        raise ValueError("noise cannot be combined with size")
    g = sample_gumbel((int(size), phi.size), rng).values
    return np.argmax(phi[None, :] + g, axis=1)


def gumbel_softmax(logits, noise=None, temperature=1.0) -> SoftMap:
    """Softmax of ``(logits + noise) / temperature`` over the whole grid.

    ``noise=None`` means zero noise (the deterministic softmax).
    """
    tau = check_temperature(temperature)
    phi = check_array(logits, "logits")
    g = _noise_values(noise, phi.shape)
    perturbed = phi + g
    return SoftMap(values=softmax(perturbed, tau).reshape(phi.shape), temperature=tau, perturbed=perturbed)


def softmax_jacobian(soft):
    """Jacobian ``dS_i / dphi_j = S_i (delta_ij - S_j) / tau`` on the flattened grid."""
    s = soft.values.ravel()
    return (np.diag(s) - np.outer(s, s)) / soft.temperature


def softmax_vjp(upstream, soft):
    """Vector-Jacobian product ``J^T g`` without materialising ``J``."""
    g = np.asarray(upstream, dtype=np.float64)
    check_same_shape(g, soft.values, names=("upstream", "soft map"))
    s = soft.values
    return s * (g - np.sum(g * s)) / soft.temperature


def gumbel_top_k(logits, k, rng=None, *, size=None, noise=None):
    """Ordered sample of ``k`` indices without replacement (Plackett-Luce).

    Perturbs once and keeps the ``k`` largest perturbed logits in descending
    order. Returns shape ``(k,)`` or ``(size, k)``.
    """
    phi = np.asarray(logits, dtype=np.float64)
    if phi.size == 0:
        raise ValueError("empty logits")
    grid_shape = phi.shape
    phi = check_array(phi.ravel(), "logits")
    n = phi.size
    k = int(k)
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    if size is None:
        g = _noise_values(noise, grid_shape).ravel() if noise is not None else sample_gumbel(phi.shape, rng).values
        return _top_k_desc(phi + g, k)
    if noise is not None:
        raise ValueError("noise cannot be combined with size")
    g = sample_gumbel((int(size), n), rng).values
    return _top_k_desc(phi[None, :] + g, k)


def _top_k_desc(values, k):
    n = values.shape[-1]
    if k < n:
        part = np.argpartition(-values, k - 1, axis=-1)[..., :k]
    else:
        part = np.broadcast_to(np.arange(n), values.shape).copy()
    picked = np.take_along_axis(values, part, axis=-1)
    order = np.argsort(-picked, axis=-1, kind="stable")
    return np.take_along_axis(part, order, axis=-1)
