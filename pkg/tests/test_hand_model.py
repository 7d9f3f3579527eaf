"""Kinematic hand: rotation conversions, FK oracles, gradients, mirroring."""

import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from hand4d.errors import ShapeMismatch
from hand4d.geometry import RigidTransform, apply_points
from hand4d.hand_model import (
    ARTICULATED,
    HandPose,
    HandSkeleton,
    N_JOINTS,
    PARENTS,
    POSE_DIM,
    REST_OFFSETS,
    SHAPE_BASIS,
    canonicalize_axis_angle,
    default_skeleton,
    fk_tensor,
    flip_lr,
    flip_lr_2d,
    forward_kinematics,
    rodrigues,
    rodrigues_tensor,
    rotation_to_axis_angle,
    skeleton_from_file,
    transform_pose,
    unpack_pose_tensor,
)


def random_pose(rng, scale=0.5) -> HandPose:
    return HandPose(
        rng.standard_normal((15, 3)) * scale,
        rng.standard_normal(10),
        rng.standard_normal(3) * scale,
        rng.standard_normal(3) * 0.1,
    )


# ---------------------------------------------------------------- rotations

def test_rodrigues_vs_scipy_oracle(rng):
    """Axis-angle exponentials must match scipy's rotvec for 100 draws."""
    for _ in range(100):
        v = rng.standard_normal(3) * rng.uniform(0.0, np.pi)
        np.testing.assert_allclose(rodrigues(v),
                                   Rotation.from_rotvec(v).as_matrix(), atol=1e-12)


def test_rodrigues_small_angles(rng):
    for mag in (0.0, 1e-12, 1e-9, 1e-7):
        v = np.array([1.0, -2.0, 0.5])
        v = v / np.linalg.norm(v) * mag
        np.testing.assert_allclose(rodrigues(v),
                                   Rotation.from_rotvec(v).as_matrix(), atol=1e-12)


def test_rodrigues_gradient_finite_at_zero():
    v = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    rodrigues_tensor(v).sum().backward()
    assert torch.isfinite(v.grad).all()


def test_rodrigues_shape_error():
    with pytest.raises(ShapeMismatch):
        rodrigues_tensor(torch.zeros(4))


def test_rotation_to_axis_angle_round_trip(rng):
    for _ in range(50):
        v = rng.standard_normal(3)
        v = v / np.linalg.norm(v) * rng.uniform(1e-4, np.pi - 1e-4)
        np.testing.assert_allclose(rotation_to_axis_angle(rodrigues(v)), v, atol=1e-9)


def test_rotation_to_axis_angle_near_pi(rng):
    """The skew part vanishes near pi; the axis must still come back."""
    for _ in range(20):
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        v = axis * (np.pi - 1e-9)
        rec = rotation_to_axis_angle(rodrigues(v))
        np.testing.assert_allclose(rodrigues(rec), rodrigues(v), atol=1e-7)


def test_canonicalize_axis_angle(rng):
    v = np.array([0.0, 0.0, 1.5 * np.pi])
    w = canonicalize_axis_angle(v)
    assert np.linalg.norm(w) <= np.pi + 1e-12
    np.testing.assert_allclose(rodrigues(w), rodrigues(v), atol=1e-12)
    small = np.array([0.1, 0.2, -0.1])
    assert np.array_equal(canonicalize_axis_angle(small), small)


# ----------------------------------------------------------------------- FK

def test_fk_zero_pose_accumulates_rest_offsets():
    joints = forward_kinematics(HandPose.zeros()).positions
    expected = np.zeros((N_JOINTS, 3))
    for j in range(1, N_JOINTS):
        expected[j] = expected[PARENTS[j]] + REST_OFFSETS[j]
    np.testing.assert_allclose(joints, expected, atol=1e-15)
    # Frozen anchors guard the rest geometry against silent edits.
    np.testing.assert_allclose(joints[8], [0.015, 0.189, 0.0], atol=1e-15)
    np.testing.assert_allclose(joints[12], [0.0, 0.204, 0.0], atol=1e-15)


def test_shape_basis_frozen():
    """The shape blend is a constant table; spot values pin it down."""
    assert SHAPE_BASIS.shape == (21, 3, 10)
    assert SHAPE_BASIS[0, 0, 0] == pytest.approx(0.001369616873214543, abs=1e-15)
    assert SHAPE_BASIS[20, 2, 9] == pytest.approx(0.0025153968760839134, abs=1e-15)
    assert float(SHAPE_BASIS.sum()) == pytest.approx(0.14224740287616686, abs=1e-12)


def test_fk_beta_moves_offsets():
    rng = np.random.default_rng(3)
    beta = rng.standard_normal(10)
    pose = HandPose(np.zeros((15, 3)), beta, np.zeros(3), np.zeros(3))
    joints = forward_kinematics(pose).positions
    offsets = REST_OFFSETS + SHAPE_BASIS @ beta
    expected = np.zeros((N_JOINTS, 3))
    for j in range(1, N_JOINTS):
        expected[j] = expected[PARENTS[j]] + offsets[j]
    np.testing.assert_allclose(joints, expected, atol=1e-12)


def test_fk_theta_preserves_bone_lengths(rng):
    """Rotations articulate the tree without stretching any bone."""
    beta = rng.standard_normal(10)
    offsets = REST_OFFSETS + SHAPE_BASIS @ beta
    rest_len = np.linalg.norm(offsets[1:], axis=1)
    pose = HandPose(rng.standard_normal((15, 3)), beta,
                    rng.standard_normal(3), rng.standard_normal(3))
    joints = forward_kinematics(pose).positions
    posed_len = np.array([np.linalg.norm(joints[j] - joints[PARENTS[j]])
                          for j in range(1, N_JOINTS)])
    np.testing.assert_allclose(posed_len, rest_len, atol=1e-9)


def test_fk_rigid_equivariance(rng):
    """FK(transform_pose(p, T)) == T applied to FK(p), within 1e-9."""
    for _ in range(25):
        pose = random_pose(rng)
        rot = Rotation.random(random_state=int(rng.integers(2**31))).as_matrix()
        t = RigidTransform(rot, rng.standard_normal(3))
        moved = forward_kinematics(transform_pose(pose, t)).positions
        expected = apply_points(t, forward_kinematics(pose).positions)
        np.testing.assert_allclose(moved, expected, atol=1e-9)


def test_fk_batched_matches_loop(rng):
    x = torch.as_tensor(rng.standard_normal((4, 3, POSE_DIM)) * 0.4)
    batched = fk_tensor(x)
    for i in range(4):
        for k in range(3):
            np.testing.assert_allclose(batched[i, k].numpy(),
                                       fk_tensor(x[i, k]).numpy(), atol=1e-12)


def test_fk_gradients_vs_finite_differences(rng):
    """Autograd joints-sum gradient vs central differences, rel err < 1e-4."""
    weights = torch.as_tensor(rng.standard_normal((N_JOINTS, 3)))
    eps = 1e-6
    for _ in range(5):
        x0 = torch.as_tensor(random_pose(rng).to_vector())
        x = x0.clone().requires_grad_(True)
        (fk_tensor(x) * weights).sum().backward()
        grad = x.grad.numpy()

        # One batched FK over all +-eps probes keeps this fast.
        probes = x0.repeat(2 * POSE_DIM, 1)
        for d in range(POSE_DIM):
            probes[2 * d, d] += eps
            probes[2 * d + 1, d] -= eps
        vals = (fk_tensor(probes) * weights).sum(dim=(-2, -1))
        fd = ((vals[0::2] - vals[1::2]) / (2 * eps)).numpy()

        denom = np.maximum(np.abs(fd), 1e-3)
        assert (np.abs(grad - fd) / denom).max() < 1e-4


def test_unpack_pose_tensor_shape_error():
    with pytest.raises(ShapeMismatch):
        unpack_pose_tensor(torch.zeros(2, 60))


# ------------------------------------------------------------------ mirroring

def test_flip_lr_involution(rng):
    pose = random_pose(rng)
    back = flip_lr(flip_lr(pose))
    np.testing.assert_array_equal(back.to_vector(), pose.to_vector())


def test_flip_lr_mirror_equivariance(rng):
    """Mirrored pose on the mirrored skeleton gives mirrored joints."""
    skel = default_skeleton()
    for _ in range(10):
        pose = random_pose(rng)
        mirrored = forward_kinematics(flip_lr(pose), skel.mirrored()).positions
        expected = forward_kinematics(pose, skel).positions * np.array([-1.0, 1.0, 1.0])
        np.testing.assert_allclose(mirrored, expected, atol=1e-12)


def test_flip_lr_2d(rng):
    kps = rng.uniform(0, 1, size=(21, 2))
    flipped = flip_lr_2d(kps)
    np.testing.assert_allclose(flipped[:, 0], 1.0 - kps[:, 0])
    np.testing.assert_array_equal(flipped[:, 1], kps[:, 1])
    np.testing.assert_allclose(flip_lr_2d(flipped), kps, atol=1e-15)
    with pytest.raises(ShapeMismatch):
        flip_lr_2d(np.zeros((21, 3)))


# ----------------------------------------------------------- types and files

def test_pose_vector_round_trip(rng):
    pose = random_pose(rng)
    v = pose.to_vector()
    assert v.shape == (POSE_DIM,)
    np.testing.assert_array_equal(HandPose.from_vector(v).to_vector(), v)
    with pytest.raises(ShapeMismatch):
        HandPose.from_vector(np.zeros(60))


def test_pose_rejects_non_finite():
    with pytest.raises(ValueError):
        HandPose(np.full((15, 3), np.nan), np.zeros(10), np.zeros(3), np.zeros(3))


def test_pose_canonicalized(rng):
    theta = np.zeros((15, 3))
    theta[4] = [0.0, 4.0, 0.0]  # magnitude > pi
    pose = HandPose(theta, np.zeros(10), np.array([0.0, 0.0, 5.0]), np.zeros(3))
    canon = pose.canonicalized()
    assert np.linalg.norm(canon.theta[4]) <= np.pi + 1e-12
    assert np.linalg.norm(canon.phi) <= np.pi + 1e-12
    np.testing.assert_allclose(forward_kinematics(canon).positions,
                               forward_kinematics(pose).positions, atol=1e-12)


def test_skeleton_validation():
    with pytest.raises(ValueError):
        HandSkeleton(parent=(0,) + PARENTS[1:])          # root must be -1
    bad = list(PARENTS)
    bad[5] = 7                                           # parent above child
    with pytest.raises(ValueError):
        HandSkeleton(parent=tuple(bad))
    shrunk = REST_OFFSETS.copy()
    shrunk[1:] *= 0.01                                   # bones below 5 mm
    with pytest.raises(ValueError):
        HandSkeleton(rest_offsets=shrunk)


def test_skeleton_mirrored_offsets():
    skel = default_skeleton().mirrored()
    np.testing.assert_array_equal(skel.rest_offsets[:, 0], -REST_OFFSETS[:, 0])
    np.testing.assert_array_equal(skel.rest_offsets[:, 1:], REST_OFFSETS[:, 1:])


def test_skeleton_from_file(tmp_path):
    import yaml

    mod = REST_OFFSETS.copy()
    mod[5] = [0.02, 0.09, 0.0]
    path = tmp_path / "skel.yaml"
    path.write_text(yaml.safe_dump({"rest_offsets": mod.tolist()}))
    skel = skeleton_from_file(path)
    np.testing.assert_allclose(skel.rest_offsets, mod)
    assert skel.parent == PARENTS


def test_articulated_map_excludes_tips():
    tips = {4, 8, 12, 16, 20}
    assert tips.isdisjoint(ARTICULATED)
    assert 0 not in ARTICULATED
    assert len(ARTICULATED) == 15
