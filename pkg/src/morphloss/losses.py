"""Training losses with values and analytic gradients.

Every loss returns a LossReport holding the scalar value and gradients with
respect to the identity coefficients alpha, the raw (pre-normalization)
quaternion, and the translation. Gradients chain through the shape decode
(d/dalpha = basis^T d/dx) and through the quaternion normalization Jacobian,
so the raw-quaternion gradient is always orthogonal to the raw quaternion.

Reductions are means over coordinates (per block for the multiterm losses),
which keeps loss magnitudes independent of the point count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    Calibration,
    CameraPose,
    Quaternion,
    Shape,
    project_camera_points,
    quat_normalize,
    quat_to_rotation,
    rotation_derivatives,
)
from .morphable import MorphableModel, ShapeParams, synthesize


@dataclass(frozen=True)
class Prediction:
    """Raw regressor outputs: identity coefficients, pre-normalization
    quaternion, translation (cm)."""

    alpha: np.ndarray = field(repr=False)
    q_raw: np.ndarray = field(repr=False)
    t: np.ndarray = field(repr=False)

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=float).reshape(-1)
        q_raw = np.array(self.q_raw, dtype=float).reshape(4)
        t = np.array(self.t, dtype=float).reshape(3)
        if not (
            np.all(np.isfinite(alpha))
            and np.all(np.isfinite(q_raw))
            and np.all(np.isfinite(t))
        ):
            raise ValueError("prediction contains non-finite values")
        if np.linalg.norm(q_raw) <= 1e-12:
            raise ValueError("raw quaternion norm too small")
        for name, arr in (("alpha", alpha), ("q_raw", q_raw), ("t", t)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class GroundTruth:
    shape: Shape
    pose: CameraPose


@dataclass(frozen=True)
class MultitermWeights:
    alpha_w: float = 0.0
    beta_w: float = 0.0
    gamma_w: float = 0.0

    def __post_init__(self):
        vals = (self.alpha_w, self.beta_w, self.gamma_w)
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise ValueError("weights must be finite and non-negative")


@dataclass(frozen=True)
class LossReport:
    value: float
    grad_alpha: np.ndarray = field(repr=False)
    grad_qraw: np.ndarray = field(repr=False)
    grad_t: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not np.isfinite(self.value) or self.value < 0:
            raise ValueError(f"loss value must be finite and >= 0, got {self.value}")
        for name in ("grad_alpha", "grad_qraw", "grad_t"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class ViewSet:
    """Virtual camera poses used by the multiview reprojection loss."""

    views: tuple[CameraPose, ...]
    frustum_margin: float = 15.0  # cm of clearance in front of the image plane

    def __post_init__(self):
        views = tuple(self.views)
        if len(views) < 1:
            raise ValueError("need at least one view")
        for k, v in enumerate(views):
            if v.t[2] > -self.frustum_margin:
                raise ValueError(
                    f"view {k} places the working volume too close to the "
                    f"image plane (t_z = {v.t[2]:.2f})"
                )
        object.__setattr__(self, "views", views)

    def __len__(self) -> int:
        return len(self.views)


def quaternion_sign_align(q_gt: Quaternion, q_pred: Quaternion) -> Quaternion:
    """Resolve the double cover: flip q_pred when its dot with q_gt is negative."""
    dot = float(q_gt.as_array() @ q_pred.as_array())
    return -q_pred if dot < 0 else q_pred


class _PredGeometry:
    """Shared forward pass: decode the shape, normalize the quaternion,
    build the rotation and the pieces every gradient chain needs."""

    def __init__(self, model: MorphableModel, pred: Prediction):
        if pred.alpha.shape[0] != model.n_components:
            raise ValueError(
                f"alpha has {pred.alpha.shape[0]} entries, model expects "
                f"{model.n_components}"
            )
        self.model = model
        self.pred = pred
        self.shape = synthesize(model, ShapeParams(pred.alpha))
        self.points = self.shape.points  # (N, 3)
        self.q, self.norm_jac = quat_normalize(pred.q_raw)
        self.rot = quat_to_rotation(self.q)
        self.rot_derivs = rotation_derivatives(self.q)  # (4, 3, 3)
        self.t = pred.t

    def report(self, value: float, d_points: np.ndarray, d_rot: np.ndarray,
               d_t: np.ndarray) -> LossReport:
        """Chain cotangents on (points, R, t) back to (alpha, q_raw, t)."""
        grad_alpha = self.model.basis.T @ d_points.reshape(-1)
        grad_qbar = np.einsum("ij,kij->k", d_rot, self.rot_derivs)
        grad_qraw = self.norm_jac.T @ grad_qbar
        return LossReport(
            value=float(value),
            grad_alpha=grad_alpha,
            grad_qraw=grad_qraw,
            grad_t=np.asarray(d_t, dtype=float),
        )


def _pixel_chain(calib: Calibration, cam: np.ndarray, px: np.ndarray,
                 d_pixels: np.ndarray):
    """Pull pixel-space cotangents back to camera coordinates.

    u = fx cx_c / cz_c + cx gives du/dcam = (fx/w, 0, (cx - u)/w); same
    pattern for v. cam is (N, 3), d_pixels (N, 2); returns (N, 3).
    """
    w = cam[:, 2]
    gu = d_pixels[:, 0]
    gv = d_pixels[:, 1]
    out = np.empty_like(cam)
    out[:, 0] = gu * calib.fx / w
    out[:, 1] = gv * calib.fy / w
    out[:, 2] = (gu * (calib.cx - px[:, 0]) + gv * (calib.cy - px[:, 1])) / w
    return out


def gal_loss(model: MorphableModel, pred: Prediction, gt: GroundTruth) -> LossReport:
    """Geometric alignment: mean L1 distance, per coordinate, between the
    ground-truth shape posed by its camera and the predicted shape posed by
    the predicted camera."""
    g = _PredGeometry(model, pred)
    target = gt.shape.points @ gt.pose.rotation().T + gt.pose.t
    posed = g.points @ g.rot.T + g.t
    diff = target - posed
    n3 = diff.size
    value = float(np.abs(diff).mean())
    s = -np.sign(diff) / n3  # dL/dposed; sign(0) = 0 keeps the optimum stationary
    d_t = s.sum(axis=0)
    d_rot = s.T @ g.points
    d_points = s @ g.rot
    return g.report(value, d_points, d_rot, d_t)


def srl_loss(
    model: MorphableModel, calib: Calibration, pred: Prediction, gt: GroundTruth
) -> LossReport:
    """Single-view reprojection: mean L1 distance, per pixel coordinate,
    between ground-truth and predicted projections in the input view."""
    g = _PredGeometry(model, pred)
    target_cam = gt.shape.points @ gt.pose.rotation().T + gt.pose.t
    target_px = project_camera_points(calib, target_cam)
    cam = g.points @ g.rot.T + g.t
    px = project_camera_points(calib, cam)
    diff = target_px - px
    n2 = diff.size
    value = float(np.abs(diff).mean())
    d_px = -np.sign(diff) / n2
    g_cam = _pixel_chain(calib, cam, px, d_px)
    d_t = g_cam.sum(axis=0)
    d_rot = g_cam.T @ g.points
    d_points = g_cam @ g.rot
    return g.report(value, d_points, d_rot, d_t)


def mrl_loss(
    model: MorphableModel,
    calib: Calibration,
    pred: Prediction,
    gt: GroundTruth,
    views: ViewSet,
) -> LossReport:
    """Multiview reprojection: the prediction's pose error becomes a rigid
    distortion D of the predicted shape, and both shapes are compared in
    projection under every virtual view.

    With [R_D | t_D] = [R|t][R_hat|t_hat]^-1 the distorted points are
    z_n = R_D (x_n - t_hat) + t, so the pose gradient flows through both
    R_D and the -t_hat offset.
    """
    g = _PredGeometry(model, pred)
    r_gt = gt.pose.rotation()
    t_gt = gt.pose.t
    r_d = r_gt @ g.rot.T
    offset = g.points - g.t  # (N, 3)
    z = offset @ r_d.T + t_gt

    n2 = 2 * g.points.shape[0]
    value = 0.0
    g_z = np.zeros_like(z)
    n_views = len(views)
    for view in views.views:
        r_v = view.rotation()
        target_px = project_camera_points(
            calib, gt.shape.points @ r_v.T + view.t
        )
        cam = z @ r_v.T + view.t
        px = project_camera_points(calib, cam)
        diff = target_px - px
        value += float(np.abs(diff).mean()) / n_views
        d_px = -np.sign(diff) / (n2 * n_views)
        g_z += _pixel_chain(calib, cam, px, d_px) @ r_v

    d_rd = g_z.T @ offset
    d_points = g_z @ r_d
    d_t = -r_d.T @ g_z.sum(axis=0)
    d_rot = d_rd.T @ r_gt  # dL/dR_hat from R_D = R R_hat^T
    return g.report(value, d_points, d_rot, d_t)


def coarse_loss(
    model: MorphableModel, pred: Prediction, gt: GroundTruth, w: MultitermWeights
) -> LossReport:
    """Shape MSE plus one weighted MSE over the concatenated [q, t] pose.

    The normalized, sign-aligned quaternion enters the concatenation; the
    pose block is mean-reduced over its 7 entries.
    """
    g = _PredGeometry(model, pred)
    diff = gt.shape.points - g.points
    n3 = diff.size
    value = float((diff**2).mean())
    d_points = -2.0 * diff / n3

    q_gt = gt.pose.q.as_array()
    q_hat = g.q.as_array()
    sign = -1.0 if float(q_gt @ q_hat) < 0 else 1.0
    rq = q_gt - sign * q_hat
    rt = gt.pose.t - g.t
    pose_term = (float(rq @ rq) + float(rt @ rt)) / 7.0
    value += w.alpha_w * pose_term

    grad_qbar = -2.0 * sign * rq * w.alpha_w / 7.0
    d_t = -2.0 * rt * w.alpha_w / 7.0
    rep = g.report(value, d_points, np.zeros((3, 3)), d_t)
    return LossReport(
        value=rep.value,
        grad_alpha=rep.grad_alpha,
        grad_qraw=rep.grad_qraw + g.norm_jac.T @ grad_qbar,
        grad_t=rep.grad_t,
    )


def xqt_loss(
    model: MorphableModel, pred: Prediction, gt: GroundTruth, w: MultitermWeights
) -> LossReport:
    """Shape MSE plus separately weighted quaternion and translation MSEs,
    each mean-reduced over its own block."""
    g = _PredGeometry(model, pred)
    diff = gt.shape.points - g.points
    n3 = diff.size
    value = float((diff**2).mean())
    d_points = -2.0 * diff / n3

    q_gt = gt.pose.q.as_array()
    q_hat = g.q.as_array()
    sign = -1.0 if float(q_gt @ q_hat) < 0 else 1.0
    rq = q_gt - sign * q_hat
    rt = gt.pose.t - g.t
    value += w.beta_w * float(rq @ rq) / 4.0 + w.gamma_w * float(rt @ rt) / 3.0

    grad_qbar = -2.0 * sign * rq * w.beta_w / 4.0
    d_t = -2.0 * rt * w.gamma_w / 3.0
    rep = g.report(value, d_points, np.zeros((3, 3)), d_t)
    return LossReport(
        value=rep.value,
        grad_alpha=rep.grad_alpha,
        grad_qraw=rep.grad_qraw + g.norm_jac.T @ grad_qbar,
        grad_t=rep.grad_t,
    )


def reg_term(pred: Prediction) -> LossReport:
    """Squared norm of the identity coefficients; the caller applies its
    own weight."""
    alpha = pred.alpha
    return LossReport(
        value=float(alpha @ alpha),
        grad_alpha=2.0 * alpha,
        grad_qraw=np.zeros(4),
        grad_t=np.zeros(3),
    )
