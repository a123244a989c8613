"""Error metrics, rigid ICP alignment, per-angle binning, and report files.

Shape errors are measured in millimeters (world units are centimeters and
converted at this boundary), translations in centimeters, rotations in
degrees, reprojections in pixels.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MorphlossError
from .geometry import (
    Calibration,
    CameraPose,
    Shape,
    project,
    quat_normalize,
    quaternion_to_ypr,
)
from .morphable import MorphableModel, ShapeParams, kabsch_rotation, synthesize
from .synthdata import Dataset, Scene
from .training import RegressorModel, predict

CM_TO_MM = 10.0


class DegenerateLandmarks(MorphlossError):
    """Landmark pairs are collinear; a rigid alignment is underdetermined."""


@dataclass
class MetricReport:
    shape3d_mm: float
    translation_cm: float
    rotation_deg: float
    reprojection_px: float
    per_scene: list[dict] = field(default_factory=list)


def shape3d_error(gt: Shape, pred: Shape) -> float:
    """Mean per-point Euclidean distance, in millimeters."""
    d = np.linalg.norm(gt.points - pred.points, axis=1)
    return float(d.mean()) * CM_TO_MM


def translation_error(gt: CameraPose, pred: CameraPose) -> float:
    return float(np.linalg.norm(gt.t - pred.t))


def rotation_error(gt: CameraPose, pred: CameraPose, mode: str = "standard") -> float:
    """Angle between rotations in degrees.

    standard: geodesic angle 2 acos(|q . q_hat|), double-cover safe.
    paper_literal: acos(2 q . q_hat) exactly as printed in the metric list,
    clamped; kept for auditability despite being undefined for dot > 0.5.
    """
    dot = float(gt.q.as_array() @ pred.q.as_array())
    if mode == "standard":
        return math.degrees(2.0 * math.acos(min(1.0, abs(dot))))
    if mode == "paper_literal":
        return math.degrees(math.acos(max(-1.0, min(1.0, 2.0 * dot))))
    raise ValueError(f"unknown rotation error mode {mode!r}")


def reprojection_error(calib: Calibration, gt, pred) -> float:
    """Mean per-point pixel distance between two projected posed shapes.

    gt and pred are (Shape, CameraPose) tuples.
    """
    gt_shape, gt_pose = gt
    pred_shape, pred_pose = pred
    a = project(calib, gt_pose, gt_shape)
    b = project(calib, pred_pose, pred_shape)
    return float(np.linalg.norm(a - b, axis=1).mean())


def depth_extent_ratio(
    gt_shape: Shape, gt_pose: CameraPose, pred_shape: Shape, pred_pose: CameraPose
) -> float:
    """Camera-frame depth extent of the prediction relative to the truth.

    Each shape is placed by its own pose; values well below 1 flag the
    flattened-shape failure mode.
    """

    def extent(shape, pose):
        z = shape.points @ pose.rotation()[2] + pose.t[2]
        return float(z.max() - z.min())

    return extent(pred_shape, pred_pose) / extent(gt_shape, gt_pose)


def evaluate_scenes(
    model: MorphableModel,
    reg: RegressorModel,
    scenes: list[Scene],
    calib: Calibration,
    rotation_mode: str = "standard",
) -> MetricReport:
    """Run the regressor on every (scene, view) sample and aggregate.

    One row per sample carries the four metrics plus the ground-truth view
    angles, ready for per-angle binning.
    """
    rows = []
    for scene in scenes:
        for view_idx, view in enumerate(scene.views):
            pred = predict(reg, view.observations)
            q, _ = quat_normalize(pred.q_raw)
            pred_pose = CameraPose(q, pred.t)
            pred_shape = synthesize(model, ShapeParams(pred.alpha))
            yaw, pitch, roll = quaternion_to_ypr(view.pose.q)
            rows.append(
                {
                    "subject_id": scene.subject_id,
                    "view": view_idx,
                    "yaw": yaw,
                    "pitch": pitch,
                    "roll": roll,
                    "shape3d_mm": shape3d_error(scene.gt_shape, pred_shape),
                    "translation_cm": translation_error(view.pose, pred_pose),
                    "rotation_deg": rotation_error(view.pose, pred_pose, rotation_mode),
                    "reprojection_px": reprojection_error(
                        calib, (scene.gt_shape, view.pose), (pred_shape, pred_pose)
                    ),
                    "depth_ratio": depth_extent_ratio(
                        scene.gt_shape, view.pose, pred_shape, pred_pose
                    ),
                }
            )
    if not rows:
        raise ValueError("no scenes to evaluate")
    return MetricReport(
        shape3d_mm=float(np.mean([r["shape3d_mm"] for r in rows])),
        translation_cm=float(np.mean([r["translation_cm"] for r in rows])),
        rotation_deg=float(np.mean([r["rotation_deg"] for r in rows])),
        reprojection_px=float(np.mean([r["reprojection_px"] for r in rows])),
        per_scene=rows,
    )


def evaluate_on_split(model, reg, dataset: Dataset, split: str = "test") -> MetricReport:
    return evaluate_scenes(model, reg, dataset.split(split), dataset.calibration)


# ---------------------------------------------------------------------------
# Rigid ICP
# ---------------------------------------------------------------------------


def _rigid_from_pairs(src: np.ndarray, dst: np.ndarray):
    """Kabsch rotation + translation mapping src points onto dst."""
    sc = src.mean(axis=0)
    dc = dst.mean(axis=0)
    r = kabsch_rotation(src - sc, dst - dc)
    t = dc - r @ sc
    return r, t


def rigid_icp_align(source: Shape, target: Shape, landmarks):
    """Align source onto target: Kabsch on landmark pairs, then ICP.

    landmarks is a sequence of (source_index, target_index) pairs, at least
    three and non-collinear. Correspondences are brute-force nearest
    neighbors with ties broken by lowest index; iteration stops when the
    RMS change drops below 1e-6 or after 50 rounds. If refinement would
    leave the landmark pairs worse than the initialization, the
    initialization wins. Returns (aligned source, 4x4 transform).
    """
    pairs = [(int(a), int(b)) for a, b in landmarks]
    if len(pairs) < 3:
        raise DegenerateLandmarks("need at least three landmark pairs")
    src_lm = source.points[[a for a, _ in pairs]]
    dst_lm = target.points[[b for _, b in pairs]]
    centered = src_lm - src_lm.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    if svals[1] < 1e-9 * max(svals[0], 1.0):
        raise DegenerateLandmarks("landmark pairs are collinear")

    r, t = _rigid_from_pairs(src_lm, dst_lm)
    init_rms = _rms(src_lm @ r.T + t - dst_lm)

    moved = source.points @ r.T + t
    prev_rms = None
    for _ in range(50):
        d = np.linalg.norm(moved[:, None, :] - target.points[None, :, :], axis=2)
        nearest = np.argmin(d, axis=1)  # argmin takes the lowest index on ties
        matched = target.points[nearest]
        rms = _rms(moved - matched)
        if prev_rms is not None and abs(prev_rms - rms) < 1e-6:
            break
        prev_rms = rms
        r_step, t_step = _rigid_from_pairs(moved, matched)
        moved = moved @ r_step.T + t_step
        r = r_step @ r
        t = r_step @ t + t_step

    final_rms = _rms(source.points[[a for a, _ in pairs]] @ r.T + t - dst_lm)
    if final_rms > init_rms:
        r, t = _rigid_from_pairs(src_lm, dst_lm)
        moved = source.points @ r.T + t
    transform = np.eye(4)
    transform[:3, :3] = r
    transform[:3, 3] = t
    return Shape(moved), transform


def _rms(residual: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.sum(residual**2, axis=1))))


# ---------------------------------------------------------------------------
# Per-angle binning and report files
# ---------------------------------------------------------------------------


def per_angle_bins(rows: list[dict], bin_width_deg: float):
    """Group metric rows by ground-truth view angle, one table per axis.

    Returns {axis: [(bin_start_deg, count, mean shape3d, mean reprojection)]}
    with empty bins simply absent.
    """
    if bin_width_deg <= 0:
        raise ValueError("bin width must be positive")
    out = {}
    for axis in ("yaw", "pitch", "roll"):
        buckets: dict[float, list[dict]] = {}
        for r in rows:
            start = math.floor(r[axis] / bin_width_deg) * bin_width_deg
            buckets.setdefault(start, []).append(r)
        table = []
        for start in sorted(buckets):
            grp = buckets[start]
            table.append(
                (
                    start,
                    len(grp),
                    float(np.mean([g["shape3d_mm"] for g in grp])),
                    float(np.mean([g["reprojection_px"] for g in grp])),
                )
            )
        out[axis] = table
    return out


def write_metric_csv(report: MetricReport, path) -> None:
    cols = [
        "subject_id", "view", "yaw", "pitch", "roll",
        "shape3d_mm", "translation_cm", "rotation_deg", "reprojection_px",
        "depth_ratio",
    ]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for row in report.per_scene:
            w.writerow({k: row[k] for k in cols})


def write_summary_json(report: MetricReport, path, extra: dict | None = None) -> None:
    payload = {
        "shape3d_mm": report.shape3d_mm,
        "translation_cm": report.translation_cm,
        "rotation_deg": report.rotation_deg,
        "reprojection_px": report.reprojection_px,
        "n_samples": len(report.per_scene),
    }
    if extra:
        payload.update(extra)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
