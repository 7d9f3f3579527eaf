"""Simplified differentiable kinematic hand: parameters -> 21 3D joints.

The pose splits into per-joint axis-angle rotations (theta, 15x3), shape
coefficients (beta, 10), a global orientation (phi) and a root translation
(gamma). Joint layout: wrist root, then thumb/index/middle/ring/pinky chains
of four joints each; finger tips carry no rotation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import torch
import yaml

from .errors import ShapeMismatch
from .geometry import RigidTransform

N_JOINTS = 21
N_ARTICULATED = 15
POSE_DIM = 61  # 45 theta + 10 beta + 3 phi + 3 gamma

PARENTS = (-1,
           0, 1, 2, 3,      # thumb
           0, 5, 6, 7,      # index
           0, 9, 10, 11,    # middle
           0, 13, 14, 15,   # ring
           0, 17, 18, 19)   # pinky

# Joints carrying a theta rotation (all but wrist and finger tips), in the
# order used by the theta rows.
ARTICULATED = (1, 2, 3, 5, 6, 7, 9, 10, 11, 13, 14, 15, 17, 18, 19)

# Child offset from parent at beta = 0, meters. Fingers extend along +y,
# thumb toward +x; values follow average adult hand proportions.
REST_OFFSETS = np.array([
    [0.000, 0.000, 0.000],    # 0 wrist
    [0.030, 0.020, -0.010],   # 1 thumb cmc
    [0.025, 0.030, -0.005],   # 2 thumb mcp
    [0.018, 0.025, 0.000],    # 3 thumb ip
    [0.012, 0.020, 0.000],    # 4 thumb tip
    [0.015, 0.095, 0.000],    # 5 index mcp
    [0.000, 0.045, 0.000],    # 6 index pip
    [0.000, 0.027, 0.000],    # 7 index dip
    [0.000, 0.022, 0.000],    # 8 index tip
    [0.000, 0.100, 0.000],    # 9 middle mcp
    [0.000, 0.050, 0.000],    # 10 middle pip
    [0.000, 0.030, 0.000],    # 11 middle dip
    [0.000, 0.024, 0.000],    # 12 middle tip
    [-0.015, 0.095, 0.000],   # 13 ring mcp
    [0.000, 0.046, 0.000],    # 14 ring pip
    [0.000, 0.028, 0.000],    # 15 ring dip
    [0.000, 0.022, 0.000],    # 16 ring tip
    [-0.030, 0.085, 0.000],   # 17 pinky mcp
    [0.000, 0.036, 0.000],    # 18 pinky pip
    [0.000, 0.022, 0.000],    # 19 pinky dip
    [0.000, 0.019, 0.000],    # 20 pinky tip
], dtype=np.float64)

# Fixed full-rank shape blend, +-5 mm per unit beta. Drawn once (seed 0) and
# treated as a constant table; PCG64 output is stable across platforms.
SHAPE_BASIS = np.random.default_rng(0).uniform(
    -0.005, 0.005, size=(N_JOINTS, 3, 10))
SHAPE_BASIS.setflags(write=False)

_MIRROR = np.array([-1.0, 1.0, 1.0])


@dataclass
class HandSkeleton:
    """Kinematic tree constants: parents, rest offsets, shape blend.

    Args:
        parent: 21 indices, wrist root stored as -1; must be topologically
            sorted (parent index below child index).
        rest_offsets: (21,3) child-from-parent offsets at beta = 0, meters.
        shape_basis: (21,3,10) meters per unit beta.
        articulated_map: the 15 joint indices that consume a theta row.
    """

    parent: Tuple[int, ...] = PARENTS
    rest_offsets: np.ndarray = field(default_factory=lambda: REST_OFFSETS.copy())
    shape_basis: np.ndarray = field(default_factory=lambda: np.array(SHAPE_BASIS))
    articulated_map: Tuple[int, ...] = ARTICULATED

    def __post_init__(self):
        self.parent = tuple(int(p) for p in self.parent)
        self.rest_offsets = np.asarray(self.rest_offsets, dtype=np.float64)
        self.shape_basis = np.asarray(self.shape_basis, dtype=np.float64)
        self.articulated_map = tuple(int(j) for j in self.articulated_map)
        if len(self.parent) != N_JOINTS or self.parent[0] != -1:
            raise ValueError("parent array must have 21 entries rooted at joint 0")
        for k in range(1, N_JOINTS):
            if not 0 <= self.parent[k] < k:
                raise ValueError("parent indices must form a topologically sorted tree")
        if self.rest_offsets.shape != (N_JOINTS, 3):
            raise ShapeMismatch(f"rest_offsets must be (21,3), got {self.rest_offsets.shape}")
        if self.shape_basis.shape != (N_JOINTS, 3, 10):
            raise ShapeMismatch(f"shape_basis must be (21,3,10), got {self.shape_basis.shape}")
        if len(self.articulated_map) != N_ARTICULATED:
            raise ValueError("articulated_map must list 15 joints")
        lengths = np.linalg.norm(self.rest_offsets[1:], axis=1)
        if lengths.min() < 0.005 or lengths.max() > 0.12:
            raise ValueError("rest bone lengths must lie in [0.005, 0.12] m")
        self._tensor_cache = {}

    def mirrored(self) -> "HandSkeleton":
        """Skeleton of the opposite hand (mirror about the x = 0 plane)."""
        return HandSkeleton(
            parent=self.parent,
            rest_offsets=self.rest_offsets * _MIRROR,
            shape_basis=self.shape_basis * _MIRROR[None, :, None],
            articulated_map=self.articulated_map,
        )

    def tensors(self, dtype=torch.float32, device="cpu"):
        """(rest_offsets, shape_basis) as torch tensors, cached per dtype."""
        key = (dtype, str(device))
        if key not in self._tensor_cache:
            self._tensor_cache[key] = (
                torch.as_tensor(self.rest_offsets, dtype=dtype, device=device),
                torch.as_tensor(self.shape_basis, dtype=dtype, device=device),
            )
        return self._tensor_cache[key]


def default_skeleton() -> HandSkeleton:
    return HandSkeleton()


def skeleton_from_file(path) -> HandSkeleton:
    """Load skeleton overrides from a YAML file with the same field names."""
    with open(path) as f:
        data = yaml.safe_load(f)
    kwargs = {}
    for name in ("parent", "rest_offsets", "shape_basis", "articulated_map"):
        if name in data:
            kwargs[name] = np.asarray(data[name]) if "offsets" in name or "basis" in name \
                else tuple(data[name])
    return HandSkeleton(**kwargs)


@dataclass
class HandPose:
    """One frame of hand state (numpy, float64)."""

    theta: np.ndarray   # (15,3) axis-angle
    beta: np.ndarray    # (10,)
    phi: np.ndarray     # (3,) global axis-angle
    gamma: np.ndarray   # (3,) root translation, meters

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(N_ARTICULATED, 3)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(10)
        self.phi = np.asarray(self.phi, dtype=np.float64).reshape(3)
        self.gamma = np.asarray(self.gamma, dtype=np.float64).reshape(3)
        for arr in (self.theta, self.beta, self.phi, self.gamma):
            if not np.all(np.isfinite(arr)):
                raise ValueError("hand pose fields must be finite")

    @staticmethod
    def zeros() -> "HandPose":
        return HandPose(np.zeros((N_ARTICULATED, 3)), np.zeros(10), np.zeros(3), np.zeros(3))

    def to_vector(self) -> np.ndarray:
        """Flatten to the canonical 61-vector: theta | beta | phi | gamma."""
        return np.concatenate([self.theta.reshape(45), self.beta, self.phi, self.gamma])

    @staticmethod
    def from_vector(v) -> "HandPose":
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.shape != (POSE_DIM,):
            raise ShapeMismatch(f"pose vector must have {POSE_DIM} entries, got {v.shape}")
        return HandPose(v[:45].reshape(15, 3), v[45:55], v[55:58], v[58:61])

    def canonicalized(self) -> "HandPose":
        """Wrap every axis-angle vector to magnitude <= pi."""
        return HandPose(
            np.stack([canonicalize_axis_angle(r) for r in self.theta]),
            self.beta,
            canonicalize_axis_angle(self.phi),
            self.gamma,
        )


@dataclass(frozen=True)
class Joints3D:
    """21 joint positions, meters; joint 0 is the wrist."""

    positions: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.shape != (N_JOINTS, 3):
            raise ShapeMismatch(f"positions must be (21,3), got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ValueError("joint positions must be finite")
        object.__setattr__(self, "positions", pos)


def canonicalize_axis_angle(v: np.ndarray) -> np.ndarray:
    """Reduce an axis-angle vector to magnitude <= pi (same rotation)."""
    v = np.asarray(v, dtype=np.float64)
    angle = np.linalg.norm(v)
    if angle <= np.pi or angle == 0.0:
        return v.copy()
    wrapped = angle % (2.0 * np.pi)
    if wrapped > np.pi:
        wrapped -= 2.0 * np.pi  # flips the axis via the negative magnitude
    return v * (wrapped / angle)


def rodrigues(axis_angle) -> np.ndarray:
    """Axis-angle (3,) to rotation matrix (3,3), numpy convenience."""
    v = torch.as_tensor(np.asarray(axis_angle, dtype=np.float64))
    return rodrigues_tensor(v).numpy()


def rodrigues_tensor(v: torch.Tensor) -> torch.Tensor:
    """Batched axis-angle to rotation, differentiable.

    Uses R = I + a[v]x + b[v]x^2 with a = sin(t)/t, b = (1-cos t)/t^2 and a
    second-order Taylor branch below ||v|| = 1e-8 so gradients stay finite at
    the zero rotation.

    Args:
        v: (..., 3) axis-angle vectors.

    Returns:
        (..., 3, 3) rotation matrices.
    """
    if v.shape[-1] != 3:
        raise ShapeMismatch(f"axis-angle tensors need a trailing dim of 3, got {v.shape}")
    t2 = (v * v).sum(-1)                       # theta^2
    small = t2 < 1e-16
    t2_safe = torch.clamp(t2, min=1e-16)
    theta = torch.sqrt(t2_safe)
    a = torch.where(small, 1.0 - t2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - t2 / 24.0, (1.0 - torch.cos(theta)) / t2_safe)

    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    zero = torch.zeros_like(x)
    skew = torch.stack([
        torch.stack([zero, -z, y], -1),
        torch.stack([z, zero, -x], -1),
        torch.stack([-y, x, zero], -1),
    ], -2)                                      # (..., 3, 3)
    eye = torch.eye(3, dtype=v.dtype, device=v.device).expand(skew.shape)
    return eye + a[..., None, None] * skew + b[..., None, None] * (skew @ skew)


def rotation_to_axis_angle(rot: np.ndarray) -> np.ndarray:
    """Matrix log of a rotation, robust near 0 and pi."""
    r = np.asarray(rot, dtype=np.float64)
    if r.shape != (3, 3):
        raise ShapeMismatch(f"rotation must be (3,3), got {r.shape}")
    cos_t = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(cos_t))
    axis_raw = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta < 1e-10:
        return 0.5 * axis_raw
    if theta > np.pi - 1e-6:
        # Near pi the skew part vanishes; recover the axis from R + I.
        b = (r + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(b), 0.0, None))
        k = int(np.argmax(axis))
        if axis[k] > 0:
            axis = b[:, k] / axis[k]
        norm = np.linalg.norm(axis)
        axis = axis / norm if norm > 0 else np.array([1.0, 0.0, 0.0])
        # Fix the sign so the small skew residue agrees with the axis.
        if np.dot(axis_raw, axis) < 0:
            axis = -axis
        return theta * axis
    return (theta / (2.0 * np.sin(theta))) * axis_raw


def unpack_pose_tensor(x: torch.Tensor):
    """Split (..., 61) flattened frames into (theta, beta, phi, gamma)."""
    if x.shape[-1] != POSE_DIM:
        raise ShapeMismatch(f"pose tensors need trailing dim {POSE_DIM}, got {x.shape}")
    theta = x[..., :45].reshape(*x.shape[:-1], N_ARTICULATED, 3)
    return theta, x[..., 45:55], x[..., 55:58], x[..., 58:61]


def fk_tensor(x: torch.Tensor, skel: Optional[HandSkeleton] = None) -> torch.Tensor:
    """Forward kinematics on flattened pose frames, differentiable.

    Args:
        x: (..., 61) pose vectors.
        skel: skeleton constants; default skeleton when omitted.

    Returns:
        (..., 21, 3) joint positions.
    """
    skel = skel or default_skeleton()
    theta, beta, phi, gamma = unpack_pose_tensor(x)
    rest, basis = skel.tensors(dtype=x.dtype, device=x.device)

    offsets = rest + torch.einsum("jcs,...s->...jc", basis, beta)   # (..., 21, 3)
    local_rot = rodrigues_tensor(theta)                             # (..., 15, 3, 3)

    theta_of = {j: i for i, j in enumerate(skel.articulated_map)}
    batch = x.shape[:-1]
    eye = torch.eye(3, dtype=x.dtype, device=x.device).expand(*batch, 3, 3)

    acc_rot = [None] * N_JOINTS
    pos = [None] * N_JOINTS
    pos[0] = torch.zeros(*batch, 3, dtype=x.dtype, device=x.device)
    acc_rot[0] = eye
    if 0 in theta_of:  # the root never articulates with the default map
        acc_rot[0] = local_rot[..., theta_of[0], :, :]
    for j in range(1, N_JOINTS):
        p = skel.parent[j]
        pos[j] = pos[p] + torch.einsum("...rc,...c->...r", acc_rot[p], offsets[..., j, :])
        if j in theta_of:
            acc_rot[j] = acc_rot[p] @ local_rot[..., theta_of[j], :, :]
        else:
            acc_rot[j] = acc_rot[p]

    joints = torch.stack(pos, dim=-2)                               # (..., 21, 3)
    global_rot = rodrigues_tensor(phi)                              # (..., 3, 3)
    joints = torch.einsum("...rc,...jc->...jr", global_rot, joints) + gamma[..., None, :]
    return joints


def forward_kinematics(pose: HandPose, skel: Optional[HandSkeleton] = None) -> Joints3D:
    """FK on a single pose; see :func:`fk_tensor` for the batched form."""
    x = torch.as_tensor(pose.to_vector(), dtype=torch.float64)
    return Joints3D(fk_tensor(x, skel).numpy())


def transform_pose(pose: HandPose, t: RigidTransform) -> HandPose:
    """Apply a rigid transform to the global fields (phi, gamma).

    FK commutes with this: FK(transform_pose(p, T)) = T(FK(p)).
    """
    new_rot = t.rotation @ rodrigues(pose.phi)
    return HandPose(
        pose.theta,
        pose.beta,
        rotation_to_axis_angle(new_rot),
        t.rotation @ pose.gamma + t.translation,
    )


def flip_lr(pose: HandPose) -> HandPose:
    """Mirror a pose about the x = 0 plane (left/right hand swap).

    Axis-angle vectors map as (x,y,z) -> (x,-y,-z); the root translation
    negates x. The mirrored pose drives the mirrored skeleton:
    FK(flip_lr(p), skel.mirrored()) equals the x-mirror of FK(p, skel).
    """
    flip_aa = np.array([1.0, -1.0, -1.0])
    return HandPose(pose.theta * flip_aa, pose.beta, pose.phi * flip_aa,
                    pose.gamma * _MIRROR)


def flip_lr_2d(kps: np.ndarray) -> np.ndarray:
    """Mirror normalized 2D keypoints about the x = 0.5 line."""
    k = np.asarray(kps, dtype=np.float64)
    if k.ndim < 1 or k.shape[-1] != 2:
        raise ShapeMismatch(f"2D keypoints need trailing dim 2, got {k.shape}")
    out = k.copy()
    out[..., 0] = 1.0 - out[..., 0]
    return out
