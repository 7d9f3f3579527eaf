"""Evaluation metrics: PA-MPJPE, AUC_J, F@5/F@15, G-MPJPE, GA-MPJPE, AccEr,
and the shared Procrustes (Umeyama) solver. All distances in millimeters.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import DegenerateConfiguration, SequenceTooShort, ShapeMismatch

MM = 1000.0
AUC_THRESHOLDS_MM = np.arange(0.0, 51.0, 1.0)
F_THRESHOLDS_MM = (5.0, 15.0)


@dataclass(frozen=True)
class SimilarityTransform:
    """p -> scale * rotation @ p + translation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=np.float64).reshape(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation


def _check_pair(pred: np.ndarray, gt: np.ndarray, min_points: int = 1):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred/gt shapes differ: {pred.shape} vs {gt.shape}")
    if pred.shape[-1] != 3:
        raise ShapeMismatch(f"points need a trailing dim of 3, got {pred.shape}")
    if pred.reshape(-1, 3).shape[0] < min_points:
        raise ShapeMismatch(f"need at least {min_points} points")
    return pred, gt


def umeyama(pred: np.ndarray, gt: np.ndarray, with_scale: bool) -> SimilarityTransform:
    """Least-squares transform minimizing ||s R pred + t - gt||^2.

    Args:
        pred: (K, 3) source points.
        gt: (K, 3) target points.
        with_scale: solve similarity (True) or rigid with s = 1 (False).

    Raises:
        DegenerateConfiguration: when the target cloud has no spatial extent.
    """
    pred, gt = _check_pair(pred, gt, min_points=3)
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    p0 = pred - mu_p
    g0 = gt - mu_g
    if np.linalg.norm(g0) < 1e-12:
        raise DegenerateConfiguration("target points are all coincident")
    if np.array_equal(pred, gt):
        # Identity is the exact optimum; skipping the SVD keeps
        # self-alignment free of round-off.
        return SimilarityTransform(1.0, np.eye(3), np.zeros(3))
    cov = g0.T @ p0 / pred.shape[0]                       # Sigma_{gt,pred}
    u, d, vt = np.linalg.svd(cov)
    sign = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[-1] = -1.0
    rot = u @ np.diag(sign) @ vt
    if with_scale:
        var_p = (p0 ** 2).sum() / pred.shape[0]
        if var_p < 1e-18:
            raise DegenerateConfiguration("source points are all coincident")
        scale = float((d * sign).sum() / var_p)
        if scale <= 0:
            raise DegenerateConfiguration("non-positive Procrustes scale")
    else:
        scale = 1.0
    trans = mu_g - scale * rot @ mu_p
    return SimilarityTransform(scale, rot, trans)


def procrustes(pred: np.ndarray, gt: np.ndarray) -> SimilarityTransform:
    """Similarity (scaled) Procrustes alignment of pred onto gt."""
    return umeyama(pred, gt, with_scale=True)


def _aligned_errors_mm(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-frame Procrustes-aligned joint errors, (N, J) in mm."""
    pred, gt = _check_pair(pred, gt)
    if pred.ndim != 3:
        raise ShapeMismatch(f"expected (N,J,3) sequences, got {pred.shape}")
    errors = np.empty(pred.shape[:2])
    for i in range(pred.shape[0]):
        aligned = procrustes(pred[i], gt[i]).apply(pred[i])
        errors[i] = np.linalg.norm(aligned - gt[i], axis=-1) * MM
    return errors


def pa_mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Per-frame similarity alignment, then mean joint error in mm."""
    return float(_aligned_errors_mm(pred, gt).mean())


def auc_j(pred: np.ndarray, gt: np.ndarray) -> float:
    """Trapezoid area under the PCK curve, thresholds 0..50 mm step 1 mm."""
    errors = _aligned_errors_mm(pred, gt).reshape(-1)
    pck = (errors[None, :] <= AUC_THRESHOLDS_MM[:, None]).mean(axis=1)
    span = AUC_THRESHOLDS_MM[-1] - AUC_THRESHOLDS_MM[0]
    return float(np.trapezoid(pck, AUC_THRESHOLDS_MM) / span)


def f_scores(pred: np.ndarray, gt: np.ndarray) -> Tuple[float, float]:
    """(F@5mm, F@15mm) on Procrustes-aligned joint sets.

    Precision counts aligned predicted joints within the threshold of some
    ground-truth joint, recall the converse; F is their harmonic mean (0 when
    both vanish). Joint-based stand-in for the mesh F-score.
    """
    pred, gt = _check_pair(pred, gt)
    if pred.ndim != 3:
        raise ShapeMismatch(f"expected (N,J,3) sequences, got {pred.shape}")
    scores = []
    for tau in F_THRESHOLDS_MM:
        precisions = []
        recalls = []
        for i in range(pred.shape[0]):
            aligned = procrustes(pred[i], gt[i]).apply(pred[i])
            dists = np.linalg.norm(aligned[:, None, :] - gt[i][None, :, :], axis=-1) * MM
            precisions.append((dists.min(axis=1) <= tau).mean())
            recalls.append((dists.min(axis=0) <= tau).mean())
        p = float(np.mean(precisions))
        r = float(np.mean(recalls))
        scores.append(0.0 if p + r == 0 else 2.0 * p * r / (p + r))
    return scores[0], scores[1]


def _rigid_fit_error(pred: np.ndarray, gt: np.ndarray, fit_frames: int) -> float:
    pred, gt = _check_pair(pred, gt)
    if pred.ndim != 3:
        raise ShapeMismatch(f"expected (N,J,3) sequences, got {pred.shape}")
    if pred.shape[0] < 2:
        raise ShapeMismatch("need at least two frames")
    fit = slice(0, fit_frames) if fit_frames else slice(None)
    transform = umeyama(pred[fit].reshape(-1, 3), gt[fit].reshape(-1, 3), with_scale=False)
    aligned = transform.apply(pred.reshape(-1, 3)).reshape(pred.shape)
    return float(np.linalg.norm(aligned - gt, axis=-1).mean() * MM)


def g_mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Rigid alignment fit on the first two frames, error over all frames."""
    return _rigid_fit_error(pred, gt, fit_frames=2)


def ga_mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Rigid alignment fit on the entire motion jointly."""
    return _rigid_fit_error(pred, gt, fit_frames=0)


def acc_err(pred: np.ndarray, gt: np.ndarray, fps: float = 1.0) -> float:
    """Mean second-difference error. mm/frame^2 at fps=1, mm/s^2 otherwise."""
    pred, gt = _check_pair(pred, gt)
    if pred.shape[0] < 3:
        raise SequenceTooShort("acceleration error needs at least 3 frames")
    acc_p = pred[2:] - 2.0 * pred[1:-1] + pred[:-2]
    acc_g = gt[2:] - 2.0 * gt[1:-1] + gt[:-2]
    return float(np.linalg.norm(acc_p - acc_g, axis=-1).mean() * MM * fps * fps)


# -- reports ----------------------------------------------------------------

METRIC_NAMES = ("pa_mpjpe_mm", "auc_j", "f_at_5", "f_at_15",
                "g_mpjpe_mm", "ga_mpjpe_mm", "acc_err_mm")


def sequence_metrics(pred: np.ndarray, gt: np.ndarray) -> Dict[str, float]:
    """All six metrics for one (N,21,3) pair."""
    f5, f15 = f_scores(pred, gt)
    return {
        "pa_mpjpe_mm": pa_mpjpe(pred, gt),
        "auc_j": auc_j(pred, gt),
        "f_at_5": f5,
        "f_at_15": f15,
        "g_mpjpe_mm": g_mpjpe(pred, gt),
        "ga_mpjpe_mm": ga_mpjpe(pred, gt),
        "acc_err_mm": acc_err(pred, gt),
    }


def aggregate(rows: List[dict]) -> Dict[str, float]:
    """Unweighted mean of every metric column over the given rows."""
    return {name: float(np.mean([r[name] for r in rows])) for name in METRIC_NAMES}


def write_reports(rows: List[dict], buckets: Dict[str, List[dict]],
                  csv_path, json_path) -> None:
    """Write the per-sequence CSV (plus aggregate rows) and the JSON report.

    Args:
        rows: per-sequence dicts with scene_id, occlusion, bucket and metrics.
        buckets: bucket label -> member rows (may be empty).
        csv_path / json_path: output locations.
    """
    header = ["scene_id", "n_frames", "occlusion", "bucket", *METRIC_NAMES]
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for r in rows:
            writer.writerow([r["scene_id"], r["n_frames"], repr(r["occlusion"]),
                             r["bucket"], *[repr(r[m]) for m in METRIC_NAMES]])
        if rows:
            overall = aggregate(rows)
            writer.writerow(["ALL", "", "", "", *[repr(overall[m]) for m in METRIC_NAMES]])
        for label in sorted(buckets):
            members = buckets[label]
            if not members:
                continue
            agg = aggregate(members)
            writer.writerow([f"BUCKET {label}", len(members), "", label,
                             *[repr(agg[m]) for m in METRIC_NAMES]])

    report = {
        "overall": aggregate(rows) if rows else {},
        "n_scenes": len(rows),
        "buckets": {
            label: {"count": len(members),
                    **(aggregate(members) if members else {})}
            for label, members in sorted(buckets.items())
        },
        "scenes": rows,
    }
    with open(json_path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
