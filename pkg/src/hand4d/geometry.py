"""Rigid transforms, pinhole projection, and occlusion bookkeeping.

Convention: column vectors, p' = R @ p + t. Extrinsics are cam-to-world maps;
the canonical space of a sequence is the camera space of its first frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import EmptyHandMask, ShapeMismatch

# Points closer than this to the image plane do not project.
Z_MIN = 1e-6

_ROTATION_ATOL = 1e-9


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element stored as a (3,3) rotation and (3,) translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if rot.shape != (3, 3):
            raise ShapeMismatch(f"rotation must be (3,3), got {rot.shape}")
        if trans.shape != (3,):
            raise ShapeMismatch(f"translation must be (3,), got {trans.shape}")
        if not np.all(np.isfinite(rot)) or not np.all(np.isfinite(trans)):
            raise ValueError("non-finite transform")
        err = np.abs(rot.T @ rot - np.eye(3)).max()
        if err > 1e-8:
            raise ValueError(f"rotation not orthonormal (|R^T R - I| = {err:.3e})")
        if np.linalg.det(rot) < 0:
            raise ValueError("rotation has negative determinant (reflection)")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def as_matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_flat(self) -> np.ndarray:
        """12 floats: row-major rotation followed by translation."""
        return np.concatenate([self.rotation.reshape(9), self.translation])

    @staticmethod
    def from_flat(values) -> "RigidTransform":
        """Rebuild from 12 floats, repairing float32 round-off in the rotation.

        Serialized rotations lose orthonormality at the ~1e-7 level; anything
        repairable is projected back onto SO(3), anything worse is rejected.
        """
        v = np.asarray(values, dtype=np.float64).reshape(-1)
        if v.shape != (12,):
            raise ShapeMismatch(f"flat transform must have 12 values, got {v.shape}")
        rot = v[:9].reshape(3, 3)
        err = np.abs(rot.T @ rot - np.eye(3)).max()
        if err > 1e-4:
            raise ValueError(f"stored rotation too far from orthonormal ({err:.3e})")
        if err > 1e-12:
            u, _, vt = np.linalg.svd(rot)
            if np.linalg.det(u @ vt) < 0:
                u[:, -1] = -u[:, -1]
            rot = u @ vt
        return RigidTransform(rot, v[9:])


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels plus image size."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: float
    height: float

    def __post_init__(self):
        for name in ("fx", "fy", "width", "height"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy, self.width, self.height])

    @staticmethod
    def from_array(values) -> "CameraIntrinsics":
        v = np.asarray(values, dtype=np.float64).reshape(-1)
        if v.shape != (6,):
            raise ShapeMismatch(f"intrinsics need 6 values, got {v.shape}")
        return CameraIntrinsics(*v.tolist())


@dataclass(frozen=True)
class BinaryMask:
    """H x W mask with values in {0, 1}."""

    grid: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid)
        if g.ndim != 2:
            raise ShapeMismatch(f"mask must be 2D, got shape {g.shape}")
        if not np.isin(g, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "grid", g.astype(np.uint8))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composite map: applying the result equals applying b, then a."""
    return RigidTransform(a.rotation @ b.rotation,
                          a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    """Inverse map; R^T is the inverse rotation for an orthonormal R."""
    rot_inv = t.rotation.T
    return RigidTransform(rot_inv, -rot_inv @ t.translation)


def cam_to_canonical(cam_to_world_i: RigidTransform,
                     cam_to_world_1: RigidTransform) -> RigidTransform:
    """Map from frame-i camera space into frame-1 (canonical) camera space.

    p_cano = invert(cam_to_world_1) ∘ cam_to_world_i applied to p. A static
    camera must canonicalize to the exact identity, so bitwise-equal
    extrinsics short-circuit before any float arithmetic.
    """
    if (np.array_equal(cam_to_world_i.rotation, cam_to_world_1.rotation)
            and np.array_equal(cam_to_world_i.translation, cam_to_world_1.translation)):
        return RigidTransform.identity()
    return compose(invert(cam_to_world_1), cam_to_world_i)


def apply_points(t: RigidTransform, points: np.ndarray) -> np.ndarray:
    """Apply a rigid transform to a (K,3) point array."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeMismatch(f"points must be (K,3), got {pts.shape}")
    return pts @ t.rotation.T + t.translation


def project_normalized(intr: CameraIntrinsics,
                       points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Pinhole-project camera-space points to [0,1]-normalized image coords.

    Args:
        intr: pinhole intrinsics.
        points: (K,3) camera-space points.

    Returns:
        (K,2) normalized coords and (K,) validity flags. A point is valid when
        its depth exceeds ``Z_MIN`` and it lands inside the unit square;
        invalid points get zeroed coordinates.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeMismatch(f"points must be (K,3), got {pts.shape}")
    z = pts[:, 2]
    in_front = z > Z_MIN
    safe_z = np.where(in_front, z, 1.0)
    u = (intr.fx * pts[:, 0] / safe_z + intr.cx) / intr.width
    v = (intr.fy * pts[:, 1] / safe_z + intr.cy) / intr.height
    uv = np.stack([u, v], axis=1)
    inside = (uv >= 0.0).all(axis=1) & (uv <= 1.0).all(axis=1)
    valid = in_front & inside
    uv[~in_front] = 0.0
    return uv, valid


def occlusion_ratio(hand_mask: BinaryMask, visible_mask: BinaryMask) -> float:
    """Fraction of hand pixels not covered by the visibility mask.

    r = (|M_hand| - |M_hand ∩ M_vis|) / |M_hand|
    """
    if hand_mask.grid.shape != visible_mask.grid.shape:
        raise ShapeMismatch(
            f"mask shapes differ: {hand_mask.grid.shape} vs {visible_mask.grid.shape}")
    hand = hand_mask.grid.astype(bool)
    n_hand = int(hand.sum())
    if n_hand == 0:
        raise EmptyHandMask("hand mask has no pixels")
    n_vis = int((hand & visible_mask.grid.astype(bool)).sum())
    return (n_hand - n_vis) / n_hand
