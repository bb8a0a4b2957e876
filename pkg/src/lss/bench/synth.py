"""Synthetic per-object feature grids with partial occlusion.

Each object owns a ``d x d`` grid of feature vectors. Support cells encode
the object's own properties through a fixed linear map ``W``; the rest
encode an occluder in front of it. A per-cell predictor that learns from
occluder cells is taught the wrong depth, which is the situation sample
selection is meant to fix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .._validation import check_random_state

PATTERNS = ("full", "bottom-half", "random-blob", "occluded-top-k")
OCCLUDED_PATTERNS = ("bottom-half", "random-blob", "occluded-top-k")
DEPTH_SCALE = 10.0
#: Seed of the generative map; fixed so every run shares the same ``W``.
GENERATIVE_SEED = 20240101
NUM_PROPERTIES = 7  # depth / DEPTH_SCALE, h, w, l, sin yaw, cos yaw, 1


@dataclass
class SynthConfig:
    grid: int = 7
    features: int = 8
    noise: float = 0.05
    patterns: tuple = OCCLUDED_PATTERNS
    depth_range: tuple = (5.0, 50.0)
    occluder_depth_ratio: tuple = (0.3, 0.8)
    max_top_rows: int = 5


@dataclass
class SynthBatch:
    features: np.ndarray  # (n, d, d, F)
    support: np.ndarray  # (n, d, d) bool
    depth: np.ndarray  # (n,)
    dims: np.ndarray  # (n, 3)
    yaw: np.ndarray  # (n,)
    distractor_depth: np.ndarray  # (n,)
    pattern: np.ndarray  # (n,) pattern names

    def __len__(self):
        return self.depth.shape[0]

    def subset(self, idx):
        return SynthBatch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    def concat(self, other):
        return SynthBatch(
            *(np.concatenate([getattr(self, f), getattr(other, f)]) for f in self.__dataclass_fields__)
        )


def generative_map(features=8):
    """``F x P`` matrix with orthonormal columns, so ``W.T`` is its pseudo-inverse."""
    if features < NUM_PROPERTIES:
        raise ValueError(f"need at least {NUM_PROPERTIES} features")
    rng = np.random.default_rng(GENERATIVE_SEED)
    q, _ = np.linalg.qr(rng.normal(size=(features, NUM_PROPERTIES)))
    return q


def property_vectors(depth, dims, yaw):
    depth, yaw = np.asarray(depth, dtype=float), np.asarray(yaw, dtype=float)
    dims = np.asarray(dims, dtype=float)
    return np.stack(
        [depth / DEPTH_SCALE, dims[..., 0], dims[..., 1], dims[..., 2], np.sin(yaw), np.cos(yaw), np.ones_like(depth)],
        axis=-1,
    )


def decode_depth(features, W):
    """Depth encoded in a feature vector, via the pseudo-inverse of ``W``."""
    return DEPTH_SCALE * (np.asarray(features) @ W[:, 0])


def support_mask(pattern, d, rng, max_top_rows=5):
    m = np.zeros((d, d), dtype=bool)
    if pattern == "full":
        m[:] = True
    elif pattern == "bottom-half":
        m[d // 2 :] = True
    elif pattern == "occluded-top-k":
        m[int(rng.integers(1, max_top_rows + 1)) :] = True
    elif pattern.startswith("occluded-top-"):
        m[int(pattern.rsplit("-", 1)[1]) :] = True
    elif pattern == "random-blob":
        size = int(rng.integers(d, d * d // 2 + 1))
        r, c = (int(v) for v in rng.integers(0, d, 2))
        m[r, c] = True
        while m.sum() < size:
            rr, cc = np.nonzero(m)
            i = int(rng.integers(len(rr)))
            dr, dc = ((0, 1), (1, 0), (0, -1), (-1, 0))[int(rng.integers(4))]
            nr, nc = rr[i] + dr, cc[i] + dc
            if 0 <= nr < d and 0 <= nc < d:
                m[nr, nc] = True
    else:
        raise ValueError(f"unknown pattern {pattern!r}")
    return m


def generate_scene(n, rng=None, config: SynthConfig = SynthConfig()) -> SynthBatch:
    """Draw ``n`` synthetic objects."""
    gen = check_random_state(rng)
    d, F = config.grid, config.features
    W = generative_map(F)
    depth = gen.uniform(*config.depth_range, n)
    dims = np.stack([gen.uniform(1.4, 1.8, n), gen.uniform(1.5, 1.9, n), gen.uniform(3.2, 4.6, n)], axis=1)
    yaw = gen.uniform(-math.pi, math.pi, n)
    occ_depth = depth * gen.uniform(*config.occluder_depth_ratio, n)
    occ_dims = np.stack([gen.uniform(0.8, 2.5, n), gen.uniform(0.5, 2.5, n), gen.uniform(0.5, 5.0, n)], axis=1)
    occ_yaw = gen.uniform(-math.pi, math.pi, n)
    patterns = np.array([config.patterns[int(i)] for i in gen.integers(len(config.patterns), size=n)], dtype=object)
    support = np.stack([support_mask(p, d, gen, config.max_top_rows) for p in patterns])
    own = property_vectors(depth, dims, yaw) @ W.T  # (n, F)
    occ = property_vectors(occ_depth, occ_dims, occ_yaw) @ W.T
    feats = np.where(support[..., None], own[:, None, None, :], occ[:, None, None, :])
    feats = feats + config.noise * gen.normal(size=feats.shape)
    return SynthBatch(feats, support, depth, dims, yaw, occ_depth, patterns)


def mixup_batch(batch: SynthBatch, rng=None, lam=0.5) -> SynthBatch:
    """Blend every object's grid with a random partner's.

    A linear per-cell head cannot see two objects through one blended
    vector, so the label is the blend the generative map implies:
    lambda-weighted depth and dims, yaw from the blended (sin, cos).
    Support is where both partners show themselves.
    """
    gen = check_random_state(rng)
    n = len(batch)
    if n < 2:
        raise ValueError("need at least two objects to mix")
    partner = (np.arange(n) + gen.integers(1, n, size=n)) % n  # never self
    a, b = batch, batch.subset(partner)

    def blend(x, y):
        return lam * x + (1.0 - lam) * y

    yaw = np.arctan2(blend(np.sin(a.yaw), np.sin(b.yaw)), blend(np.cos(a.yaw), np.cos(b.yaw)))
    return SynthBatch(
        features=blend(a.features, b.features),
        support=a.support & b.support,
        depth=blend(a.depth, b.depth),
        dims=blend(a.dims, b.dims),
        yaw=yaw,
        distractor_depth=blend(a.distractor_depth, b.distractor_depth),
        pattern=np.array([f"{p}+{q}" for p, q in zip(a.pattern, b.pattern)], dtype=object),
    )
