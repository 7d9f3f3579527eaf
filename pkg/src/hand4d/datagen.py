"""Seeded synthetic scene generator: splined hand motion in world space,
static or orbiting cameras, occlusion and missing-condition bursts, rendered
condition signals, and cached vision feature grids.

Geometry chain: world motion -> per-frame camera joints -> canonical space
(the first frame's camera). Stored motion is canonical; 3D conditions are the
per-frame camera joints mapped through cam_to_canonical, which makes frame 1's
condition bitwise equal to its camera-space joints.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import json
import numpy as np
import torch
from scipy.interpolate import CubicSpline

from .container import read_container, write_container
from .errors import HandLeavesFrustum, ShapeMismatch
from .geometry import (CameraIntrinsics, RigidTransform, apply_points,
                       cam_to_canonical, invert, project_normalized)
from .hand_model import (HandPose, HandSkeleton, default_skeleton, fk_tensor,
                         transform_pose)
from .joint_vae import ConditionSignal, MotionSequence
from .perceptron import FeatureGrid, synthetic_feature_provider

SCENE_VERSION = 1
TRAIN_SEEDS = range(0, 900)
TEST_SEEDS = range(900, 1000)
MASK_KINDS = ("keypoints2d", "keypoints3d", "mano", "vision")

# Per-axis articulation ranges, radians: flexion, abduction, twist.
THETA_RANGES = np.array([(-0.2, 1.6), (-0.35, 0.35), (-0.2, 0.2)])

DEFAULT_INTRINSICS = CameraIntrinsics(fx=300.0, fy=300.0, cx=128.0, cy=128.0,
                                      width=256.0, height=256.0)


@dataclass(frozen=True)
class GenSpec:
    """Controls one scene draw; same spec + seed gives identical scenes."""

    seed: int
    n_frames: int = 48
    camera_mode: str = "static"
    keyframe_count: int = 6
    occlusion_regime: str = "clean"
    burst_len: Tuple[int, int] = (4, 10)
    burst_count: Tuple[int, int] = (1, 3)
    feat_h: int = 8
    feat_w: int = 8
    feat_dim: int = 64

    def __post_init__(self):
        if self.n_frames < 8:
            raise ValueError("need at least 8 frames")
        if self.keyframe_count < 2:
            raise ValueError("need at least 2 keyframes")
        if self.camera_mode not in ("static", "dynamic"):
            raise ValueError(f"unknown camera mode {self.camera_mode!r}")
        if self.occlusion_regime not in ("clean", "bursty"):
            raise ValueError(f"unknown occlusion regime {self.occlusion_regime!r}")


@dataclass
class SyntheticScene:
    """One generated sequence with everything the trainer and evaluator need."""

    motion: MotionSequence                      # canonical space
    extrinsics: List[RigidTransform]            # cam_to_world per frame
    intrinsics: CameraIntrinsics
    occlusion: np.ndarray                       # (N,) r_occ per frame
    condition_masks: Dict[str, np.ndarray]      # kind -> (N,) bool
    conditions: Dict[str, ConditionSignal]
    visibility2d: np.ndarray                    # (N,21) bool
    occluded: np.ndarray                        # (N,21) bool
    features: FeatureGrid
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.motion.n_frames
        if len(self.extrinsics) != n or len(self.occlusion) != n:
            raise ShapeMismatch("scene field lengths disagree")
        if self.occlusion.min() < 0 or self.occlusion.max() > 1:
            raise ValueError("r_occ must lie in [0,1]")
        for kind, mask in self.condition_masks.items():
            if mask.shape != (n,):
                raise ShapeMismatch(f"mask {kind} must be ({n},)")

    @property
    def n_frames(self) -> int:
        return self.motion.n_frames

    @property
    def scene_id(self) -> str:
        return f"scene_{self.meta.get('seed', 'x'):>06}" \
            if isinstance(self.meta.get("seed"), int) else "scene_x"


def _sub_seeds(seed: int, n: int) -> List[np.random.Generator]:
    return [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(n)]


def motion_splines(spec: GenSpec, rng: Optional[np.random.Generator] = None,
                   keyframe_override: Optional[np.ndarray] = None):
    """Per-DOF cubic splines through seeded keyframes (world space).

    Returns (splines, knots): one CubicSpline over all 61 DOFs (vectorized)
    and the keyframe times. ``keyframe_override`` replaces the drawn (K, 61)
    keyframe array, which the tests use to pin degenerate cases.
    """
    rng = rng or _sub_seeds(spec.seed, 4)[0]
    k = spec.keyframe_count
    knots = np.linspace(0.0, spec.n_frames - 1.0, k)

    if keyframe_override is not None:
        keys = np.asarray(keyframe_override, dtype=np.float64)
        if keys.shape != (k, 61):
            raise ShapeMismatch(f"keyframe override must be ({k},61), got {keys.shape}")
    else:
        lo, hi = THETA_RANGES[:, 0], THETA_RANGES[:, 1]
        margin = 0.1 * (hi - lo)
        theta = rng.uniform(lo + margin, hi - margin, size=(k, 15, 3))
        beta = np.tile(np.clip(rng.normal(0.0, 1.0, size=10), -2.0, 2.0), (k, 1))
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        phi0 = axis * rng.uniform(0.0, 0.75 * np.pi)
        phi = phi0[None] + np.cumsum(
            np.vstack([np.zeros(3), rng.uniform(-0.3, 0.3, size=(k - 1, 3))]), axis=0)
        gamma = rng.uniform(-0.07, 0.07, size=(k, 3))
        keys = np.concatenate([theta.reshape(k, 45), beta, phi, gamma], axis=1)

    return CubicSpline(knots, keys, axis=0, bc_type="natural"), knots


def gen_motion(spec: GenSpec, rng: Optional[np.random.Generator] = None,
               keyframe_override: Optional[np.ndarray] = None) -> MotionSequence:
    """Sample a C2-smooth world-space motion; theta keyframes stay inside
    anatomical per-axis ranges (spline overshoot is bounded by the margin)."""
    spline, _ = motion_splines(spec, rng, keyframe_override)
    frames = spline(np.arange(spec.n_frames, dtype=np.float64))
    return MotionSequence(frames)


def _fk_joints(motion: MotionSequence, skel: Optional[HandSkeleton] = None) -> np.ndarray:
    """(N,21,3) world joints for every frame."""
    x = torch.as_tensor(motion.params, dtype=torch.float64)
    return fk_tensor(x, skel).numpy()


def _look_at(position: np.ndarray, target: np.ndarray) -> RigidTransform:
    """cam_to_world with +z toward the target; degenerate straight-up views
    are excluded by the elevation ranges used below."""
    fwd = target - position
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 1.0, 0.0])
    x_c = np.cross(fwd, up)
    x_c = x_c / np.linalg.norm(x_c)
    y_c = np.cross(fwd, x_c)
    rot = np.stack([x_c, y_c, fwd], axis=1)
    return RigidTransform(rot, position)


def _orbit_position(radius: float, azimuth: float, elevation: float,
                    target: np.ndarray) -> np.ndarray:
    direction = np.array([
        np.cos(elevation) * np.sin(azimuth),
        np.sin(elevation),
        -np.cos(elevation) * np.cos(azimuth),
    ])
    return target + radius * direction


def _centroid_in_view(extrinsics: List[RigidTransform], centroids: np.ndarray,
                      intr: CameraIntrinsics, margin: float = 0.1) -> float:
    """Fraction of frames whose hand centroid projects inside the margin box."""
    ok = 0
    for ext, c in zip(extrinsics, centroids):
        cam = apply_points(invert(ext), c[None])
        uv, valid = project_normalized(intr, cam)
        inside = valid[0] and margin <= uv[0, 0] <= 1 - margin \
            and margin <= uv[0, 1] <= 1 - margin
        ok += bool(inside)
    return ok / len(extrinsics)


def gen_camera(spec: GenSpec, centroids: Optional[np.ndarray] = None,
               rng: Optional[np.random.Generator] = None,
               intr: CameraIntrinsics = DEFAULT_INTRINSICS,
               max_retries: int = 40) -> List[RigidTransform]:
    """Seeded camera trajectory keeping the hand centroid well inside frame.

    Static mode repeats one pose; dynamic mode splines radius/azimuth/
    elevation through seeded keyframes around the mean hand position. Draws
    failing the >= 95% in-frustum check are retried with fresh sub-draws.

    Args:
        spec: generation spec (mode, frame count, seed).
        centroids: (N,3) per-frame world hand centroids; defaults to the
            origin (the nominal hand box center).
        rng: generator; derived from spec.seed when omitted.
        intr: projection used for the frustum check.
        max_retries: attempts before HandLeavesFrustum.
    """
    rng = rng or _sub_seeds(spec.seed, 4)[1]
    n = spec.n_frames
    if centroids is None:
        centroids = np.zeros((n, 3))
    target = centroids.mean(axis=0)

    for _ in range(max_retries):
        radius = rng.uniform(0.45, 0.7)
        azimuth = rng.uniform(-0.6, 0.6)
        elevation = rng.uniform(-0.35, 0.35)
        if spec.camera_mode == "static":
            pose = _look_at(_orbit_position(radius, azimuth, elevation, target), target)
            extrinsics = [pose] * n
        else:
            k = 4
            knots = np.linspace(0.0, n - 1.0, k)
            params = np.stack([
                radius + rng.uniform(-0.08, 0.08, size=k),
                azimuth + np.cumsum(rng.uniform(-0.25, 0.25, size=k)),
                elevation + np.cumsum(rng.uniform(-0.12, 0.12, size=k)),
            ], axis=1)
            spline = CubicSpline(knots, params, axis=0, bc_type="natural")
            values = spline(np.arange(n, dtype=np.float64))
            extrinsics = [
                _look_at(_orbit_position(r, az, np.clip(el, -0.5, 0.5), target), target)
                for r, az, el in values]
        if _centroid_in_view(extrinsics, centroids, intr) >= 0.95:
            return extrinsics
    raise HandLeavesFrustum(
        f"no camera draw kept the hand in frame after {max_retries} tries (seed {spec.seed})")


def _occlusion_pattern(spec: GenSpec, rng: np.random.Generator) -> np.ndarray:
    """(N,21) occluded-joint flags per the regime's burst model."""
    n = spec.n_frames
    occluded = np.zeros((n, 21), dtype=bool)
    if spec.occlusion_regime == "clean":
        return occluded
    for _ in range(rng.integers(spec.burst_count[0], spec.burst_count[1] + 1)):
        length = int(rng.integers(spec.burst_len[0], spec.burst_len[1] + 1))
        start = int(rng.integers(0, max(n - length, 1)))
        frac = rng.uniform(0.4, 1.0)
        joints = rng.random(21) < frac
        occluded[start:start + length, joints] = True
    return occluded


def _modality_masks(spec: GenSpec, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Per-modality availability masks; bursts of unavailability when bursty."""
    n = spec.n_frames
    masks = {kind: np.ones(n, dtype=bool) for kind in MASK_KINDS}
    if spec.occlusion_regime == "clean":
        return masks
    for kind in MASK_KINDS:
        for _ in range(rng.integers(spec.burst_count[0], spec.burst_count[1] + 1)):
            if rng.random() < 0.5:      # not every modality drops in every burst
                continue
            length = int(rng.integers(spec.burst_len[0], spec.burst_len[1] + 1))
            start = int(rng.integers(0, max(n - length, 1)))
            masks[kind][start:start + length] = False
    return masks


def render_conditions(motion_world: MotionSequence,
                      extrinsics: List[RigidTransform],
                      intr: CameraIntrinsics,
                      occluded: np.ndarray,
                      condition_masks: Dict[str, np.ndarray],
                      feature_seed: int,
                      spec: GenSpec,
                      skel: Optional[HandSkeleton] = None):
    """Produce canonical conditions and the feature grid for a scene.

    Returns (motion_cano, conditions, visibility2d, features). The 3D
    condition is the per-frame camera joints mapped through cam_to_canonical;
    2D keypoints preserve the first-frame camera's projection.
    """
    n = motion_world.n_frames
    world_joints = _fk_joints(motion_world, skel)
    to_cano = invert(extrinsics[0])

    cano_params = np.stack([
        transform_pose(motion_world.pose(i), to_cano).to_vector() for i in range(n)])
    motion_cano = MotionSequence(cano_params)

    cond3d = np.empty((n, 21, 3))
    for i in range(n):
        cam_joints = apply_points(invert(extrinsics[i]), world_joints[i])
        cond3d[i] = apply_points(cam_to_canonical(extrinsics[i], extrinsics[0]), cam_joints)

    cond2d = np.empty((n, 21, 2))
    in_frustum = np.empty((n, 21), dtype=bool)
    for i in range(n):
        cond2d[i], in_frustum[i] = project_normalized(intr, cond3d[i])
    visibility = in_frustum & ~occluded

    features = synthetic_feature_provider(cond2d, visibility, spec.feat_h,
                                          spec.feat_w, spec.feat_dim, feature_seed)
    conditions = {
        "keypoints2d": ConditionSignal("keypoints2d", cond2d, condition_masks["keypoints2d"]),
        "keypoints3d": ConditionSignal("keypoints3d", cond3d, condition_masks["keypoints3d"]),
        "mano": ConditionSignal("mano", cano_params, condition_masks["mano"]),
    }
    return motion_cano, conditions, visibility, features


def gen_scene(spec: GenSpec, skel: Optional[HandSkeleton] = None) -> SyntheticScene:
    """Generate one fully rendered scene; bit-deterministic per (spec, seed)."""
    rng_motion, rng_cam, rng_occ, rng_feat = _sub_seeds(spec.seed, 4)
    feature_seed = int(rng_feat.integers(0, 2 ** 31 - 1))

    motion_world = gen_motion(spec, rng_motion)
    centroids = _fk_joints(motion_world, skel).mean(axis=1)
    extrinsics = gen_camera(spec, centroids, rng_cam)

    occluded = _occlusion_pattern(spec, rng_occ)
    condition_masks = _modality_masks(spec, rng_occ)
    r_occ = occluded.mean(axis=1)

    motion_cano, conditions, visibility, features = render_conditions(
        motion_world, extrinsics, DEFAULT_INTRINSICS, occluded, condition_masks,
        feature_seed, spec, skel)

    meta = {"seed": spec.seed, "camera_mode": spec.camera_mode,
            "regime": spec.occlusion_regime, "feature_seed": feature_seed,
            "version": SCENE_VERSION}
    return SyntheticScene(motion_cano, extrinsics, DEFAULT_INTRINSICS,
                          r_occ, condition_masks, conditions, visibility,
                          occluded, features, meta)


def occlusion_bucket(r_occ: float) -> str:
    """Bucket label for an occlusion ratio in [0,1]."""
    if not 0.0 <= r_occ <= 1.0:
        raise ValueError(f"r_occ must lie in [0,1], got {r_occ}")
    pct = r_occ * 100.0
    if pct < 25.0:
        return "[0,25)"
    if pct < 50.0:
        return "[25,50)"
    if pct < 75.0:
        return "[50,75)"
    return "[75,100]"


BUCKET_LABELS = ("[0,25)", "[25,50)", "[50,75)", "[75,100]")


# -- persistence --------------------------------------------------------------


def save_scene(scene: SyntheticScene, path) -> None:
    arrays = {
        "motion": scene.motion.params.astype(np.float32),
        "extrinsics": np.stack([e.to_flat() for e in scene.extrinsics]).astype(np.float32),
        "intrinsics": scene.intrinsics.to_array().astype(np.float32),
        "occlusion": scene.occlusion.astype(np.float32),
        "vis2d": scene.visibility2d.astype(np.uint8),
        "occluded": scene.occluded.astype(np.uint8),
        "features": scene.features.tokens,
        "cond/keypoints2d": scene.conditions["keypoints2d"].data.astype(np.float32),
        "cond/keypoints3d": scene.conditions["keypoints3d"].data.astype(np.float32),
        "cond/mano": scene.conditions["mano"].data.astype(np.float32),
    }
    for kind, mask in scene.condition_masks.items():
        arrays[f"mask/{kind}"] = mask.astype(np.uint8)
    write_container(path, "scene", scene.meta, arrays)


def load_scene(path) -> SyntheticScene:
    kind, meta, arrays = read_container(path)
    if kind != "scene":
        raise ValueError(f"expected a scene file, got kind {kind!r}")
    if meta.get("version") != SCENE_VERSION:
        raise ValueError(f"unsupported scene version {meta.get('version')}")
    masks = {k.split("/", 1)[1]: arrays[k].astype(bool)
             for k in arrays if k.startswith("mask/")}
    conditions = {
        "keypoints2d": ConditionSignal("keypoints2d", arrays["cond/keypoints2d"],
                                       masks["keypoints2d"]),
        "keypoints3d": ConditionSignal("keypoints3d", arrays["cond/keypoints3d"],
                                       masks["keypoints3d"]),
        "mano": ConditionSignal("mano", arrays["cond/mano"], masks["mano"]),
    }
    return SyntheticScene(
        MotionSequence(arrays["motion"]),
        [RigidTransform.from_flat(row) for row in arrays["extrinsics"]],
        CameraIntrinsics.from_array(arrays["intrinsics"]),
        arrays["occlusion"].astype(np.float64),
        masks,
        conditions,
        arrays["vis2d"].astype(bool),
        arrays["occluded"].astype(bool),
        FeatureGrid(arrays["features"]),
        meta,
    )


def window_scene(scene: SyntheticScene, start: int, length: int) -> SyntheticScene:
    """Re-canonicalize a frame window to its own first camera.

    start = 0 with the full length returns the scene unchanged (bit-exact).
    """
    n = scene.n_frames
    if start < 0 or length < 1 or start + length > n:
        raise ShapeMismatch(f"window [{start},{start + length}) outside 0..{n}")
    if start == 0 and length == n:
        return scene
    sl = slice(start, start + length)
    ext = scene.extrinsics[sl]
    remap = cam_to_canonical(scene.extrinsics[0], scene.extrinsics[start])

    params = np.stack([
        transform_pose(scene.motion.pose(i), remap).to_vector()
        for i in range(start, start + length)])
    old3d = scene.conditions["keypoints3d"].data[sl]
    new3d = np.empty_like(old3d)
    for i in range(length):
        cam = apply_points(invert(cam_to_canonical(ext[i], scene.extrinsics[0])), old3d[i])
        new3d[i] = apply_points(cam_to_canonical(ext[i], ext[0]), cam)
    new2d = np.empty((length, 21, 2))
    in_frustum = np.empty((length, 21), dtype=bool)
    for i in range(length):
        new2d[i], in_frustum[i] = project_normalized(scene.intrinsics, new3d[i])
    occluded = scene.occluded[sl]
    visibility = in_frustum & ~occluded
    masks = {k: m[sl] for k, m in scene.condition_masks.items()}
    spec_dims = scene.features.tokens.shape
    features = synthetic_feature_provider(new2d, visibility, spec_dims[1],
                                          spec_dims[2], spec_dims[3],
                                          scene.meta.get("feature_seed", 0))
    conditions = {
        "keypoints2d": ConditionSignal("keypoints2d", new2d, masks["keypoints2d"]),
        "keypoints3d": ConditionSignal("keypoints3d", new3d, masks["keypoints3d"]),
        "mano": ConditionSignal("mano", params, masks["mano"]),
    }
    return SyntheticScene(
        MotionSequence(params), ext, scene.intrinsics,
        scene.occlusion[sl], masks, conditions, visibility, occluded,
        features, dict(scene.meta, window_start=start))


def write_manifest(out_dir, filenames: List[str], spec_fields: dict,
                   split: str = "train") -> Path:
    """Write the split manifest JSON next to the scene files."""
    path = Path(out_dir) / "manifest.json"
    payload = {"version": SCENE_VERSION, "split": split,
               "scenes": filenames, "spec": spec_fields}
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    return path


def load_split(data_dir) -> List[SyntheticScene]:
    """Load every scene listed in a split manifest."""
    data_dir = Path(data_dir)
    with open(data_dir / "manifest.json") as f:
        manifest = json.load(f)
    return [load_scene(data_dir / name) for name in manifest["scenes"]]
