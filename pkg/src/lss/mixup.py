"""MixUp3D: blend two scenes shot with the same camera and keep both label sets.

Blending is only allowed between scenes whose intrinsics agree (focal
length, principal point, resolution); the mixed image is then still a
plausible pinhole image of two overlapping scenes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence

import numpy as np
from PIL import Image
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_random_state
from .kitti import (
    CameraIntrinsics,
    Object3DLabel,
    parse_calib,
    parse_label_file,
    serialize_calib,
    serialize_label_file,
)

DEFAULT_TOLERANCE = 1e-3
BETA_RANGE = (0.3, 0.7)


@dataclass
class Scene:
    image: np.ndarray  # H x W x 3, uint8
    intrinsics: CameraIntrinsics
    labels: List[Object3DLabel] = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"image must be H x W x 3, got {self.image.shape}")
        if self.image.dtype != np.uint8:
            raise ValueError("image must be 8-bit")
        h, w = self.image.shape[:2]
        if self.intrinsics.resolution == (0, 0):
            self.intrinsics = self.intrinsics.with_resolution(w, h)
        elif self.intrinsics.resolution != (w, h):
            raise ValueError(f"image {w}x{h} does not match intrinsics {self.intrinsics.resolution}")


@dataclass(frozen=True)
class MixConfig:
    policy: str = "fixed"  # "fixed" or "beta"
    lam: float = 0.5
    alpha: float = 1.0
    intrinsics_tolerance: float = DEFAULT_TOLERANCE

    def __post_init__(self):
        if self.policy not in ("fixed", "beta"):
            raise ValueError(f"unknown lambda policy {self.policy!r}")
        if self.policy == "fixed" and not 0.0 < self.lam < 1.0:
            raise ValueError("fixed lambda must lie strictly inside (0, 1)")
        if self.policy == "beta" and self.alpha <= 0:
            raise ValueError("beta alpha must be positive")

    def sample_lambda(self, rng):
        if self.policy == "fixed":
            return float(self.lam)
        lo, hi = BETA_RANGE
        # rejection keeps the Beta shape inside the allowed window
        while True:
            lam = float(rng.beta(self.alpha, self.alpha))
            if lo <= lam <= hi:
                return lam


def check_compatible(a: CameraIntrinsics, b: CameraIntrinsics, tol=DEFAULT_TOLERANCE):
    """Names of every violated constraint; empty when the cameras agree."""
    violations = []

    def off(x, y):
        return abs(x - y) / abs(x) > tol

    if off(a.fx, b.fx) or off(a.fy, b.fy):
        violations.append("focal_length")
    if off(a.cx, b.cx) or off(a.cy, b.cy):
        violations.append("principal_point")
    if a.resolution != b.resolution:
        violations.append("resolution")
    return violations


def mix_images(a, b, lam):
    """``lam * a + (1 - lam) * b``, rounded half-to-even back to uint8."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if not 0.0 < lam < 1.0:
        raise ValueError("lambda must lie strictly inside (0, 1)")
    mixed = lam * a.astype(np.float64) + (1.0 - lam) * b.astype(np.float64)
    return np.clip(np.rint(mixed), 0, 255).astype(np.uint8)


def mix_labels(a: Sequence[Object3DLabel], b: Sequence[Object3DLabel]):
    return list(a) + list(b)


def mix_scenes(primary: Scene, partner: Scene, lam) -> Scene:
    return Scene(
        image=mix_images(primary.image, partner.image, lam),
        intrinsics=primary.intrinsics,
        labels=mix_labels(primary.labels, partner.labels),
        name=f"{primary.name}_mix_{partner.name}",
    )


def group_compatible(scenes: Sequence[Scene], tol=DEFAULT_TOLERANCE):
    """Single pass: each scene joins the first group whose founder it matches."""
    groups: List[List[int]] = []
    for i, scene in enumerate(scenes):
        for g in groups:
            if not check_compatible(scenes[g[0]].intrinsics, scene.intrinsics, tol):
                g.append(i)
                break
        else:
            groups.append([i])
    return groups


@dataclass
class AugmentResult:
    scenes: List[Scene]
    report: dict

    def report_json(self):
        return json.dumps(self.report, indent=2, sort_keys=True)


def augment_dataset(scenes: Sequence[Scene], cfg: MixConfig = MixConfig(), rng=None) -> AugmentResult:
    """Mix every scene once, as primary, with a random compatible partner.

    Scenes without a compatible partner pass through unchanged and get a
    rejection record listing what each other scene violated.
    """
    scenes = list(scenes)
    if len(scenes) < 2:
        raise ValueError("need at least two scenes")
    gen = check_random_state(rng)
    groups = group_compatible(scenes, cfg.intrinsics_tolerance)
    group_of = {i: g for g in groups for i in g}
    out, pairs, rejected = [], [], []
    for i, scene in enumerate(scenes):
        partners = [j for j in group_of[i] if j != i]
        if not partners:
            reasons = {
                scenes[j].name or str(j): check_compatible(scene.intrinsics, scenes[j].intrinsics, cfg.intrinsics_tolerance)
                for j in range(len(scenes))
                if j != i
            }
            rejected.append({"scene": scene.name or str(i), "reason": "no compatible partner", "violations": reasons})
            out.append(scene)
            continue
        j = partners[int(gen.integers(len(partners)))]
        lam = cfg.sample_lambda(gen)
        mixed = mix_scenes(scene, scenes[j], lam)
        out.append(mixed)
        pairs.append(
            {
                "primary": scene.name or str(i),
                "partner": scenes[j].name or str(j),
                "lambda": lam,
                "labels": len(mixed.labels),
                "output": mixed.name,
            }
        )
    report = {
        "policy": cfg.policy,
        "intrinsics_tolerance": cfg.intrinsics_tolerance,
        "groups": [[scenes[i].name or str(i) for i in g] for g in groups],
        "pairs": pairs,
        "rejected": rejected,
        "mixed": len(pairs),
        "passed_through": len(rejected),
    }
    return AugmentResult(out, report)


class MixUp3D(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`augment_dataset` for scene lists."""

    def __init__(self, policy="fixed", lam=0.5, alpha=1.0, intrinsics_tolerance=DEFAULT_TOLERANCE, random_state=None):
        self.policy = policy
        self.lam = lam
        self.alpha = alpha
        self.intrinsics_tolerance = intrinsics_tolerance
        self.random_state = random_state

    def fit(self, X, y=None):
        self.config_ = MixConfig(self.policy, self.lam, self.alpha, self.intrinsics_tolerance)
        self._rng = check_random_state(self.random_state)
        return self

    def transform(self, X):
        result = augment_dataset(X, self.config_, self._rng)
        self.report_ = result.report
        return result.scenes


# -- KITTI directory layout -----------------------------------------------


def read_kitti_dir(root) -> List[Scene]:
    """Scenes from ``image_2/``, ``label_2/`` and ``calib/`` under ``root``.

    Frames are matched by file stem; a missing label file means no labels.
    """
    root = Path(root)
    image_dir, label_dir, calib_dir = root / "image_2", root / "label_2", root / "calib"
    if not image_dir.is_dir() or not calib_dir.is_dir():
        raise FileNotFoundError(f"{root} lacks image_2/ or calib/")
    scenes = []
    for img_path in sorted(image_dir.glob("*.png")):
        stem = img_path.stem
        with Image.open(img_path) as im:
            image = np.asarray(im.convert("RGB"))
        h, w = image.shape[:2]
        K = parse_calib((calib_dir / f"{stem}.txt").read_text(), w, h)
        label_path = label_dir / f"{stem}.txt"
        labels = parse_label_file(label_path.read_text()) if label_path.exists() else []
        scenes.append(Scene(image, K, labels, stem))
    return scenes


def write_kitti_dir(root, scenes: Sequence[Scene]):
    root = Path(root)
    for sub in ("image_2", "label_2", "calib"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for scene in scenes:
        Image.fromarray(scene.image).save(root / "image_2" / f"{scene.name}.png")
        (root / "label_2" / f"{scene.name}.txt").write_text(serialize_label_file(scene.labels))
        (root / "calib" / f"{scene.name}.txt").write_text(serialize_calib(scene.intrinsics))
