"""KITTI object labels and calibration: parsing, serialisation, projection.

Label lines carry 15 whitespace-separated fields::

    type truncated occluded alpha left top right bottom h w l x y z rotation_y

Serialisation writes every real with two decimals and ``occluded`` as an
integer, which is the form the devkit ships, so canonical lines round-trip
byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

DONT_CARE = "DontCare"
NUM_FIELDS = 15


class KittiFormatError(ValueError):
    def __init__(self, message, lineno=None):
        self.lineno = lineno
        prefix = f"line {lineno}: " if lineno is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class Object3DLabel:
    class_name: str
    truncation: float
    occlusion: int
    alpha: float
    bbox2d: Tuple[float, float, float, float]
    dims: Tuple[float, float, float]  # h, w, l
    location: Tuple[float, float, float]  # x, y, z (camera frame)
    rotation_y: float

    @property
    def is_dont_care(self):
        return self.class_name == DONT_CARE

    def validate(self):
        if self.is_dont_care:
            return
        left, top, right, bottom = self.bbox2d
        if not (right > left and bottom > top):
            raise ValueError(f"degenerate 2D box {self.bbox2d}")
        if min(self.dims) <= 0:
            raise ValueError(f"non-positive dimensions {self.dims}")
        if self.occlusion not in (0, 1, 2, 3):
            raise ValueError(f"occlusion must be 0..3, got {self.occlusion}")


def _fmt(x):
    s = f"{x:.2f}"
    return "0.00" if s == "-0.00" else s


def parse_label_line(text, lineno=None, *, validate=True) -> Object3DLabel:
    fields = text.split()
    if len(fields) != NUM_FIELDS:
        raise KittiFormatError(f"expected {NUM_FIELDS} fields, got {len(fields)}", lineno)
    try:
        nums = [float(v) for v in fields[1:]]
    except ValueError as exc:
        raise KittiFormatError(f"unparsable number ({exc})", lineno) from None
    if not all(np.isfinite(nums)):
        raise KittiFormatError("non-finite value", lineno)
    if nums[1] != int(nums[1]):
        raise KittiFormatError(f"occlusion must be an integer, got {fields[2]}", lineno)
    label = Object3DLabel(
        class_name=fields[0],
        truncation=nums[0],
        occlusion=int(nums[1]),
        alpha=nums[2],
        bbox2d=tuple(nums[3:7]),
        dims=tuple(nums[7:10]),
        location=tuple(nums[10:13]),
        rotation_y=nums[13],
    )
    if validate:
        try:
            label.validate()
        except ValueError as exc:
            raise KittiFormatError(str(exc), lineno) from None
    return label


def serialize_label(label: Object3DLabel) -> str:
    parts = [label.class_name, _fmt(label.truncation), str(int(label.occlusion)), _fmt(label.alpha)]
    parts += [_fmt(v) for v in (*label.bbox2d, *label.dims, *label.location, label.rotation_y)]
    return " ".join(parts)


def parse_label_file(text, *, validate=True) -> List[Object3DLabel]:
    """Parse a whole ``label_2`` file; blank lines are skipped."""
    labels = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            labels.append(parse_label_line(line, lineno, validate=validate))
    return labels


def serialize_label_file(labels: Sequence[Object3DLabel]) -> str:
    return "".join(serialize_label(lab) + "\n" for lab in labels)


@dataclass(frozen=True)
class CameraIntrinsics:
    P: np.ndarray  # 3 x 4
    width: int = 0
    height: int = 0

    def __post_init__(self):
        P = np.asarray(self.P, dtype=np.float64).reshape(3, 4)
        object.__setattr__(self, "P", P)
        if P[0, 0] <= 0 or P[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def fx(self):
        return float(self.P[0, 0])

    @property
    def fy(self):
        return float(self.P[1, 1])

    @property
    def cx(self):
        return float(self.P[0, 2])

    @property
    def cy(self):
        return float(self.P[1, 2])

    @property
    def resolution(self):
        return (self.width, self.height)

    def with_resolution(self, width, height):
        return CameraIntrinsics(self.P, int(width), int(height))


def parse_calib(text, width=0, height=0) -> CameraIntrinsics:
    """Read the ``P2:`` row of a KITTI calibration file."""
    for lineno, line in enumerate(text.splitlines(), start=1):
        key, _, rest = line.partition(":")
        if key.strip() != "P2":
            continue
        try:
            vals = [float(v) for v in rest.split()]
        except ValueError as exc:
            raise KittiFormatError(f"unparsable P2 entry ({exc})", lineno) from None
        if len(vals) != 12:
            raise KittiFormatError(f"P2 needs 12 values, got {len(vals)}", lineno)
        return CameraIntrinsics(np.array(vals).reshape(3, 4), width, height)
    raise KittiFormatError("missing P2")


def serialize_calib(K: CameraIntrinsics) -> str:
    return "P2: " + " ".join(f"{v:.12e}" for v in K.P.ravel()) + "\n"


def project_to_image(point, K: CameraIntrinsics) -> Tuple[float, float]:
    """Pinhole projection through the full 3x4 ``P`` (translation included)."""
    x, y, z = (float(v) for v in point)
    if z <= 0:
        raise ValueError("behind camera")
    u, v, w = K.P @ np.array([x, y, z, 1.0])
    return float(u / w), float(v / w)


def center_offset(label: Object3DLabel, K: CameraIntrinsics) -> Optional[Tuple[float, float]]:
    """Projected 3D centre minus the 2D box centre, in pixels.

    The 3D centre is the box centre, half a height above the KITTI bottom
    location. ``None`` for DontCare records.
    """
    if label.is_dont_care:
        return None
    x, y, z = label.location
    u, v = project_to_image((x, y - label.dims[0] / 2.0, z), K)
    left, top, right, bottom = label.bbox2d
    return u - (left + right) / 2.0, v - (top + bottom) / 2.0
