"""Central finite-difference verification of every loss gradient.

This is the package's verification gate: each loss is probed on random
instances against a numeric derivative, with evaluation points resampled
when a residual coordinate sits close enough to an L1 kink (or a
sign-alignment tie) that the difference stencil would straddle it.
"""

from __future__ import annotations

import time

import numpy as np

from .geometry import Calibration, CameraPose, Quaternion, Shape, default_calibration
from .losses import (
    GroundTruth,
    MultitermWeights,
    Prediction,
    ViewSet,
    coarse_loss,
    gal_loss,
    mrl_loss,
    srl_loss,
    xqt_loss,
)
from .morphable import MorphableModel, ShapeParams, build_model, face_template, synthesize
from .synthdata import PoseRanges, sample_view_pose
from .training import LOSS_NAMES

FD_STEP = 1e-5
REL_TOL = 1e-4
ABS_TOL = 1e-6
KINK_MARGIN = 5e-4  # residual units; comfortably wider than step * sensitivity


def _tiny_model(rng: np.random.Generator, n_points: int = 40, n_comp: int = 6):
    template, pairs = face_template(n_points)
    shapes = []
    for _ in range(n_comp + 3):
        scale = np.exp(rng.normal(0.0, 0.12, 3))
        pts = template.points * scale + rng.normal(0.0, 0.15, template.points.shape)
        shapes.append(Shape(pts))
    return build_model(shapes, n_comp, pairs)


def _random_instance(rng: np.random.Generator, model: MorphableModel):
    std = np.sqrt(np.maximum(model.eigenvalues, 1e-4))
    gt_alpha = rng.normal(0.0, 1.0, model.n_components) * std
    gt_shape = synthesize(model, ShapeParams(gt_alpha))
    pose = sample_view_pose(rng, PoseRanges())
    pred = Prediction(
        alpha=gt_alpha + rng.normal(0.0, 0.5, model.n_components) * std,
        q_raw=pose.q.as_array() * rng.uniform(0.4, 2.5) + rng.normal(0.0, 0.05, 4),
        t=pose.t + rng.normal(0.0, 1.5, 3),
    )
    views = ViewSet(tuple(sample_view_pose(rng, PoseRanges()) for _ in range(3)))
    weights = MultitermWeights(
        alpha_w=float(rng.uniform(0.1, 5.0)),
        beta_w=float(rng.uniform(0.1, 5.0)),
        gamma_w=float(rng.uniform(0.1, 5.0)),
    )
    return pred, GroundTruth(gt_shape, pose), views, weights


def _loss_fn(name, model, calib, gt, views, weights):
    if name == "gal":
        return lambda p: gal_loss(model, p, gt)
    if name == "srl":
        return lambda p: srl_loss(model, calib, p, gt)
    if name == "mrl":
        return lambda p: mrl_loss(model, calib, p, gt, views)
    if name == "coarse":
        return lambda p: coarse_loss(model, p, gt, weights)
    if name == "xqt":
        return lambda p: xqt_loss(model, p, gt, weights)
    raise ValueError(name)


def _min_kink_distance(name, model, calib, pred, gt, views) -> float:
    """Smallest |residual coordinate| relevant to the loss's kinks.

    Smooth losses only kink at the quaternion sign-alignment tie, so the
    distance reported there is |q . q_hat|.
    """
    shape = synthesize(model, ShapeParams(pred.alpha))
    q_raw = pred.q_raw / np.linalg.norm(pred.q_raw)
    q = Quaternion.from_array(q_raw)
    pose = CameraPose(q, pred.t)
    if name == "gal":
        a = gt.shape.points @ gt.pose.rotation().T + gt.pose.t
        b = shape.points @ pose.rotation().T + pose.t
        return float(np.min(np.abs(a - b)))
    if name == "srl":
        from .geometry import project

        return float(np.min(np.abs(project(calib, gt.pose, gt.shape)
                                   - project(calib, pose, shape))))
    if name == "mrl":
        from .geometry import pose_relative, project

        d = pose_relative(gt.pose, pose)
        distorted = Shape(shape.points @ d[:3, :3].T + d[:3, 3])
        m = np.inf
        for v in views.views:
            diff = project(calib, v, gt.shape) - project(calib, v, distorted)
            m = min(m, float(np.min(np.abs(diff))))
        return m
    # coarse / xqt: gradient flips only at the double-cover tie
    return float(abs(gt.pose.q.as_array() @ q_raw))


def finite_difference_gradients(fn, pred: Prediction, step: float = FD_STEP):
    """Central differences of fn's value over all prediction coordinates."""

    def value(alpha, qraw, t):
        return fn(Prediction(alpha=alpha, q_raw=qraw, t=t)).value

    out = {}
    for block, arr in (("alpha", pred.alpha), ("qraw", pred.q_raw), ("t", pred.t)):
        g = np.zeros_like(arr)
        for i in range(arr.size):
            hi = arr.copy()
            lo = arr.copy()
            hi[i] += step
            lo[i] -= step
            args = {"alpha": pred.alpha, "qraw": pred.q_raw, "t": pred.t}
            args[block] = hi
            v_hi = value(args["alpha"], args["qraw"], args["t"])
            args[block] = lo
            v_lo = value(args["alpha"], args["qraw"], args["t"])
            g[i] = (v_hi - v_lo) / (2 * step)
        out[block] = g
    return out


def _block_ok(analytic, numeric, rel_tol, abs_tol):
    err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    return bool(np.all(err <= np.maximum(abs_tol, rel_tol * scale))), float(
        np.max(err / np.maximum(scale, abs_tol))
    )


def check_loss_gradients(
    loss_name: str,
    trials: int = 50,
    seed: int = 0,
    rel_tol: float = REL_TOL,
    abs_tol: float = ABS_TOL,
    step: float = FD_STEP,
    corrupt_block: str | None = None,
) -> dict:
    """Compare analytic and finite-difference gradients on random instances.

    corrupt_block is a test hook that perturbs one analytic block so the
    negative path (a reported failure naming the block) can be exercised.
    """
    if loss_name not in LOSS_NAMES:
        raise ValueError(f"unknown loss {loss_name!r}")
    if trials < 1:
        raise ValueError("need at least one trial")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5_050_505]))
    calib = default_calibration()
    model = _tiny_model(rng)

    failures = []
    worst = 0.0
    t0 = time.perf_counter()
    for k in range(trials):
        for _attempt in range(60):
            pred, gt, views, weights = _random_instance(rng, model)
            if _min_kink_distance(loss_name, model, calib, pred, gt, views) > KINK_MARGIN:
                break
        else:
            raise RuntimeError("could not find a kink-free evaluation point")
        fn = _loss_fn(loss_name, model, calib, gt, views, weights)
        rep = fn(pred)
        analytic = {"alpha": rep.grad_alpha, "qraw": rep.grad_qraw, "t": rep.grad_t}
        if corrupt_block:
            analytic = dict(analytic)
            analytic[corrupt_block] = analytic[corrupt_block] * 1.5 + 1e-2
        numeric = finite_difference_gradients(fn, pred, step)
        for block in ("alpha", "qraw", "t"):
            ok, err = _block_ok(analytic[block], numeric[block], rel_tol, abs_tol)
            worst = max(worst, err)
            if not ok:
                failures.append({"trial": k, "block": block, "max_rel_err": err})
    return {
        "loss": loss_name,
        "trials": trials,
        "failures": failures,
        "passed": not failures,
        "worst_rel_err": worst,
        "wall_s": time.perf_counter() - t0,
    }


def check_all_losses(trials: int = 50, seed: int = 0, **kw) -> dict:
    reports = {name: check_loss_gradients(name, trials, seed, **kw) for name in LOSS_NAMES}
    return {"passed": all(r["passed"] for r in reports.values()), "losses": reports}
