import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from lss.kitti import CameraIntrinsics, serialize_label, serialize_label_file, parse_label_file
from lss.mixup import (
    BETA_RANGE,
    MixConfig,
    MixUp3D,
    Scene,
    augment_dataset,
    check_compatible,
    mix_images,
    mix_labels,
    read_kitti_dir,
    write_kitti_dir,
)

from conftest import KITTI_P2


def K(fx=721.5377, fy=721.5377, cx=609.5593, cy=172.854, w=1242, h=375):
    P = KITTI_P2.copy()
    P[0, 0], P[1, 1], P[0, 2], P[1, 2] = fx, fy, cx, cy
    return CameraIntrinsics(P, w, h)


# -- constraints ----------------------------------------------------------


def test_identical_intrinsics_compatible():
    assert check_compatible(K(), K()) == []


def test_focal_violation():
    assert check_compatible(K(), K(fx=721.5377 * 1.1)) == ["focal_length"]
    assert check_compatible(K(), K(fy=700.0)) == ["focal_length"]


def test_principal_point_violation():
    assert check_compatible(K(), K(cx=650.0)) == ["principal_point"]


def test_resolution_violation():
    assert check_compatible(K(), K(w=1224, h=370)) == ["resolution"]


def test_all_violations_listed():
    assert check_compatible(K(), K(fx=800, cy=200, w=10)) == ["focal_length", "principal_point", "resolution"]


def test_tolerance_is_relative():
    assert check_compatible(K(), K(fx=721.5377 * (1 + 5e-4))) == []
    assert check_compatible(K(), K(fx=721.5377 * (1 + 2e-3))) == ["focal_length"]
    assert check_compatible(K(), K(fx=721.5377 * (1 + 2e-3)), tol=1e-2) == []


# -- pixels and labels ----------------------------------------------------


def test_midpoint():
    a = np.full((2, 2, 3), 100, np.uint8)
    b = np.full((2, 2, 3), 50, np.uint8)
    assert np.all(mix_images(a, b, 0.5) == 75)


def test_half_to_even_rounding():
    a = np.array([[[1, 2, 3]]], np.uint8)
    b = np.array([[[0, 1, 0]]], np.uint8)
    # 0.5, 1.5, 1.5 -> 0, 2, 2
    np.testing.assert_array_equal(mix_images(a, b, 0.5), [[[0, 2, 2]]])


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.99))
def test_equal_inputs_unchanged(seed, lam):
    a = np.random.default_rng(seed).integers(0, 256, (4, 5, 3), dtype=np.uint8)
    np.testing.assert_array_equal(mix_images(a, a, lam), a)


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.99))
def test_mixed_pixels_bounded(seed, lam):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    b = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    m = mix_images(a, b, lam).astype(int)
    assert np.all(m >= np.minimum(a, b)) and np.all(m <= np.maximum(a, b))


def test_mix_image_errors():
    a = np.zeros((2, 2, 3), np.uint8)
    with pytest.raises(ValueError):
        mix_images(a, np.zeros((2, 3, 3), np.uint8), 0.5)
    with pytest.raises(ValueError):
        mix_images(a, a, 1.0)


def test_label_union(scene_factory):
    rng = np.random.default_rng(0)
    a, b = scene_factory(rng, "a", 3), scene_factory(rng, "b", 2)
    mixed = mix_labels(a.labels, b.labels)
    assert len(mixed) == 5 and mixed[:3] == a.labels and mixed[3:] == b.labels
    assert mix_labels([], b.labels) == b.labels
    text = serialize_label_file(mixed)
    assert serialize_label_file(parse_label_file(text)) == text
    assert text.splitlines() == [serialize_label(l) for l in a.labels + b.labels]


# -- config ---------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        MixConfig(lam=0.0)
    with pytest.raises(ValueError):
        MixConfig(lam=1.0)
    with pytest.raises(ValueError):
        MixConfig(policy="uniform")
    with pytest.raises(ValueError):
        MixConfig(policy="beta", alpha=0)


def test_beta_lambda_stays_in_window():
    rng = np.random.default_rng(0)
    cfg = MixConfig(policy="beta", alpha=0.4)
    lams = np.array([cfg.sample_lambda(rng) for _ in range(2000)])
    assert lams.min() >= BETA_RANGE[0] and lams.max() <= BETA_RANGE[1]
    assert MixConfig().sample_lambda(rng) == 0.5


def test_scene_resolution_must_match():
    img = np.zeros((6, 8, 3), np.uint8)
    assert Scene(img, CameraIntrinsics(KITTI_P2)).intrinsics.resolution == (8, 6)
    with pytest.raises(ValueError):
        Scene(img, CameraIntrinsics(KITTI_P2, 10, 6))
    with pytest.raises(ValueError):
        Scene(img.astype(np.int32), CameraIntrinsics(KITTI_P2))


# -- dataset augmentation -------------------------------------------------


def test_two_compatible_scenes(scene_factory):
    rng = np.random.default_rng(1)
    scenes = [scene_factory(rng, "a", 3), scene_factory(rng, "b", 2)]
    res = augment_dataset(scenes, MixConfig(), 0)
    assert res.report["mixed"] == 2 and res.report["passed_through"] == 0
    assert [s.name for s in res.scenes] == ["a_mix_b", "b_mix_a"]
    assert [len(s.labels) for s in res.scenes] == [5, 5]
    assert all(p["lambda"] == 0.5 for p in res.report["pairs"])


def test_two_incompatible_scenes(scene_factory):
    rng = np.random.default_rng(2)
    P = KITTI_P2.copy()
    P[0, 0] *= 1.1
    a, b = scene_factory(rng, "a", 1), scene_factory(rng, "b", 1, P=P)
    res = augment_dataset([a, b], MixConfig(), 0)
    assert res.report["mixed"] == 0 and res.report["passed_through"] == 2
    assert len(res.report["rejected"]) == 2
    assert res.report["rejected"][0]["violations"] == {"b": ["focal_length"]}
    assert res.scenes[0] is a and res.scenes[1] is b


def test_needs_two_scenes(scene_factory):
    with pytest.raises(ValueError):
        augment_dataset([scene_factory(np.random.default_rng(0), "a")])


def test_hundred_scenes_counting(scene_factory):
    rng = np.random.default_rng(3)
    scenes = [scene_factory(rng, f"{i:06d}") for i in range(100)]
    by_name = {s.name: s for s in scenes}
    res = augment_dataset(scenes, MixConfig(policy="beta"), 5)
    assert res.report["mixed"] == 100
    for pair, out in zip(res.report["pairs"], res.scenes):
        a, b = by_name[pair["primary"]], by_name[pair["partner"]]
        assert pair["primary"] != pair["partner"]
        assert len(out.labels) == len(a.labels) + len(b.labels) == pair["labels"]
        assert out.labels == a.labels + b.labels  # geometry untouched
        lo, hi = np.minimum(a.image, b.image).astype(int), np.maximum(a.image, b.image).astype(int)
        assert np.all(out.image >= lo - 1) and np.all(out.image <= hi + 1)


def test_gate_is_total(scene_factory):
    rng = np.random.default_rng(4)
    scenes = []
    for i in range(40):
        P = KITTI_P2.copy()
        P[0, 0] *= [1.0, 1.05, 1.2][i % 3]
        scenes.append(scene_factory(rng, str(i), P=P))
    res = augment_dataset(scenes, MixConfig(), 0)
    names = {s.name: s for s in scenes}
    for pair in res.report["pairs"]:
        assert check_compatible(names[pair["primary"]].intrinsics, names[pair["partner"]].intrinsics) == []
    assert len(res.report["groups"]) == 3


def test_deterministic(scene_factory):
    scenes = [scene_factory(np.random.default_rng(5), str(i)) for i in range(10)]
    a = augment_dataset(scenes, MixConfig(policy="beta"), 9)
    b = augment_dataset(scenes, MixConfig(policy="beta"), 9)
    assert a.report_json() == b.report_json()
    assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a.scenes, b.scenes))
    json.loads(a.report_json())


def test_estimator_wrapper(scene_factory):
    rng = np.random.default_rng(6)
    scenes = [scene_factory(rng, str(i), 1) for i in range(4)]
    est = MixUp3D(random_state=0)
    assert clone(est).get_params() == est.get_params()
    out = est.fit_transform(scenes)
    assert len(out) == 4 and est.report_["mixed"] == 4


def test_kitti_directory_round_trip(tmp_path, scene_factory):
    rng = np.random.default_rng(7)
    scenes = [scene_factory(rng, f"{i:06d}", 2) for i in range(3)]
    write_kitti_dir(tmp_path, scenes)
    back = read_kitti_dir(tmp_path)
    assert [s.name for s in back] == [s.name for s in scenes]
    for a, b in zip(scenes, back):
        np.testing.assert_array_equal(a.image, b.image)
        assert a.labels == b.labels
        np.testing.assert_array_equal(a.intrinsics.P, b.intrinsics.P)
        assert b.intrinsics.resolution == (8, 6)
    with pytest.raises(FileNotFoundError):
        read_kitti_dir(tmp_path / "missing")
