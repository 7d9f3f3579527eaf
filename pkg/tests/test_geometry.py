"""Rigid-transform algebra against a 4x4 homogeneous-matrix oracle."""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from hand4d.errors import EmptyHandMask, ShapeMismatch
from hand4d.geometry import (
    BinaryMask,
    CameraIntrinsics,
    RigidTransform,
    Z_MIN,
    apply_points,
    cam_to_canonical,
    compose,
    invert,
    occlusion_ratio,
    project_normalized,
)


def random_transform(rng) -> RigidTransform:
    rot = Rotation.random(random_state=int(rng.integers(2**31))).as_matrix()
    return RigidTransform(rot, rng.standard_normal(3) * 2.0)


def test_compose_invert_vs_matrix_oracle(rng):
    """compose/invert/cam_to_canonical must match plain 4x4 matrix algebra."""
    for _ in range(200):
        a = random_transform(rng)
        b = random_transform(rng)
        np.testing.assert_allclose(compose(a, b).as_matrix(),
                                   a.as_matrix() @ b.as_matrix(), atol=1e-9)
        np.testing.assert_allclose(invert(a).as_matrix(),
                                   np.linalg.inv(a.as_matrix()), atol=1e-9)
        np.testing.assert_allclose(
            cam_to_canonical(a, b).as_matrix(),
            np.linalg.inv(b.as_matrix()) @ a.as_matrix(), atol=1e-9)


def test_static_canonicalization_exact_identity(rng):
    """Bitwise-equal extrinsics canonicalize to the exact identity."""
    t = random_transform(rng)
    same = RigidTransform(t.rotation.copy(), t.translation.copy())
    out = cam_to_canonical(t, same)
    assert np.array_equal(out.rotation, np.eye(3))
    assert np.array_equal(out.translation, np.zeros(3))


def test_invert_round_trip(rng):
    for _ in range(20):
        t = random_transform(rng)
        rt = compose(invert(t), t)
        np.testing.assert_allclose(rt.as_matrix(), np.eye(4), atol=1e-12)


def test_apply_points_matches_matrix(rng):
    t = random_transform(rng)
    pts = rng.standard_normal((21, 3))
    homog = np.concatenate([pts, np.ones((21, 1))], axis=1)
    expected = (t.as_matrix() @ homog.T).T[:, :3]
    np.testing.assert_allclose(apply_points(t, pts), expected, atol=1e-12)


def test_compose_application_order(rng):
    """compose(a, b) applied to p equals a(b(p))."""
    a, b = random_transform(rng), random_transform(rng)
    pts = rng.standard_normal((5, 3))
    np.testing.assert_allclose(apply_points(compose(a, b), pts),
                               apply_points(a, apply_points(b, pts)), atol=1e-12)


def test_rotation_validation():
    with pytest.raises(ValueError):
        RigidTransform(np.eye(3) * 2.0, np.zeros(3))
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))  # reflection
    with pytest.raises(ShapeMismatch):
        RigidTransform(np.eye(4), np.zeros(3))
    with pytest.raises(ValueError):
        RigidTransform(np.eye(3), np.array([np.nan, 0, 0]))


def test_flat_round_trip_bitwise(rng):
    t = random_transform(rng)
    t2 = RigidTransform.from_flat(t.to_flat())
    assert np.array_equal(t2.rotation, t.rotation)
    assert np.array_equal(t2.translation, t.translation)


def test_from_flat_repairs_float32(rng):
    """float32 storage round-off is projected back onto SO(3)."""
    t = random_transform(rng)
    flat32 = t.to_flat().astype(np.float32)
    t2 = RigidTransform.from_flat(flat32)
    err = np.abs(t2.rotation.T @ t2.rotation - np.eye(3)).max()
    assert err < 1e-12
    np.testing.assert_allclose(t2.rotation, t.rotation, atol=1e-5)
    with pytest.raises(ValueError):
        RigidTransform.from_flat(np.concatenate([np.ones(9), np.zeros(3)]))


def _intr():
    return CameraIntrinsics(fx=300.0, fy=300.0, cx=128.0, cy=128.0,
                            width=256.0, height=256.0)


def test_projection_center():
    """A point on the optical axis lands at the principal point."""
    uv, valid = project_normalized(_intr(), np.array([[0.0, 0.0, 1.0]]))
    np.testing.assert_allclose(uv[0], [0.5, 0.5])
    assert valid[0]


def test_projection_oracle(rng):
    intr = _intr()
    pts = rng.standard_normal((50, 3)) * 0.2 + np.array([0.0, 0.0, 0.6])
    uv, valid = project_normalized(intr, pts)
    for i in range(50):
        x, y, z = pts[i]
        if z <= Z_MIN:
            assert not valid[i]
            assert np.array_equal(uv[i], [0.0, 0.0])
            continue
        u = (intr.fx * x / z + intr.cx) / intr.width
        v = (intr.fy * y / z + intr.cy) / intr.height
        np.testing.assert_allclose(uv[i], [u, v], atol=1e-12)
        assert valid[i] == (0.0 <= u <= 1.0 and 0.0 <= v <= 1.0)


def test_projection_behind_camera_invalid():
    uv, valid = project_normalized(_intr(), np.array([[0.0, 0.0, -1.0],
                                                      [0.1, 0.1, 0.0]]))
    assert not valid.any()
    assert np.array_equal(uv, np.zeros((2, 2)))


def test_projection_out_of_frame_invalid():
    # In front of the camera but far outside the image bounds.
    uv, valid = project_normalized(_intr(), np.array([[10.0, 0.0, 0.5]]))
    assert not valid[0]


def test_occlusion_ratio_exact(rng):
    """Ratio matches an integer pixel count on random masks."""
    for _ in range(25):
        hand = rng.integers(0, 2, size=(16, 16)).astype(np.uint8)
        if hand.sum() == 0:
            hand[0, 0] = 1
        vis = rng.integers(0, 2, size=(16, 16)).astype(np.uint8)
        r = occlusion_ratio(BinaryMask(hand), BinaryMask(vis))
        n_hand = int(hand.sum())
        n_cov = int((hand & vis).sum())
        assert r == (n_hand - n_cov) / n_hand


def test_occlusion_ratio_bounds():
    hand = BinaryMask(np.ones((4, 4), dtype=np.uint8))
    assert occlusion_ratio(hand, BinaryMask(np.ones((4, 4), dtype=np.uint8))) == 0.0
    assert occlusion_ratio(hand, BinaryMask(np.zeros((4, 4), dtype=np.uint8))) == 1.0


def test_occlusion_ratio_errors():
    with pytest.raises(EmptyHandMask):
        occlusion_ratio(BinaryMask(np.zeros((4, 4), dtype=np.uint8)),
                        BinaryMask(np.ones((4, 4), dtype=np.uint8)))
    with pytest.raises(ShapeMismatch):
        occlusion_ratio(BinaryMask(np.ones((4, 4), dtype=np.uint8)),
                        BinaryMask(np.ones((5, 4), dtype=np.uint8)))


def test_binary_mask_validation():
    with pytest.raises(ValueError):
        BinaryMask(np.full((3, 3), 2))
    with pytest.raises(ShapeMismatch):
        BinaryMask(np.zeros(9))


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=-1.0, fy=1.0, cx=0.0, cy=0.0, width=10.0, height=10.0)
    arr = _intr().to_array()
    assert CameraIntrinsics.from_array(arr) == _intr()
