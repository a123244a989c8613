"""Bounded random search for the multiterm baselines' weights and learning
rate, with the scale-matching procedure that sets the search bounds.

20 trials of log-uniform random search stand in for a Bayesian optimizer;
the trial log format leaves room for a smarter sampler later.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import MorphlossError
from .geometry import Calibration
from .morphable import MorphableModel, ShapeParams, synthesize
from .training import INIT_QUAT, INIT_T

LR_BOUNDS = (1e-5, 1e-3)


class ScaleUndefined(MorphlossError):
    """A loss term averaged to zero; no scale can be estimated."""


class SearchFailed(MorphlossError):
    """Every trial failed."""


@dataclass(frozen=True)
class SearchSpace:
    bounds: dict[str, tuple[float, float]]
    budget: int = 20

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be at least 1")
        for name, (lo, hi) in self.bounds.items():
            if not (0 < lo < hi):
                raise ValueError(f"bad bounds for {name!r}: ({lo}, {hi})")


@dataclass
class Trial:
    index: int
    params: dict[str, float]
    metrics: dict[str, float] | None
    wall_s: float
    status: str
    payload: object = field(default=None, repr=False)


@dataclass
class SearchResult:
    best: Trial
    trials: list[Trial]


def estimate_scales(model: MorphableModel, scenes, n_max: int = 200):
    """Ratios that bring each pose term onto the shape term's scale.

    Terms are evaluated at the initialized predictor (mean shape at the
    canonical pose) over the sample, mean-reduced per block exactly as the
    multiterm losses reduce them. Returns (alpha_scale, beta_scale,
    gamma_scale) for the concatenated-pose, quaternion, and translation
    terms respectively.
    """
    scenes = list(scenes)[:n_max]
    if len(scenes) < 20:
        raise ValueError("need at least 20 scenes to estimate scales")
    mean_shape = synthesize(model, ShapeParams(np.zeros(model.n_components)))
    shape_terms, concat_terms, q_terms, t_terms = [], [], [], []
    for scene in scenes:
        diff = scene.gt_shape.points - mean_shape.points
        shape_terms.append(float((diff**2).mean()))
        for view in scene.views:
            q_gt = view.pose.q.as_array()
            sign = -1.0 if float(q_gt @ INIT_QUAT) < 0 else 1.0
            rq = q_gt - sign * INIT_QUAT
            rt = view.pose.t - INIT_T
            q_terms.append(float(rq @ rq) / 4.0)
            t_terms.append(float(rt @ rt) / 3.0)
            concat_terms.append((float(rq @ rq) + float(rt @ rt)) / 7.0)
    shape_mean = float(np.mean(shape_terms))
    scales = []
    for name, terms in (
        ("concatenated pose", concat_terms),
        ("quaternion", q_terms),
        ("translation", t_terms),
    ):
        m = float(np.mean(terms))
        if m <= 0 or shape_mean <= 0:
            raise ScaleUndefined(f"{name} term mean is zero on this sample")
        scales.append(shape_mean / m)
    return tuple(scales)


def bounds_around(scale: float) -> tuple[float, float]:
    """One order of magnitude below and above the estimated scale."""
    return (0.1 * scale, 10.0 * scale)


def search_space_for(loss: str, scales, budget: int = 20) -> SearchSpace:
    alpha_scale, beta_scale, gamma_scale = scales
    if loss == "coarse":
        bounds = {"alpha_w": bounds_around(alpha_scale), "lr": LR_BOUNDS}
    elif loss == "xqt":
        bounds = {
            "beta_w": bounds_around(beta_scale),
            "gamma_w": bounds_around(gamma_scale),
            "lr": LR_BOUNDS,
        }
    else:
        raise ValueError(f"{loss!r} takes no hyperparameter search")
    return SearchSpace(bounds=bounds, budget=budget)


def random_search(
    space: SearchSpace, train_fn, seed: int, log_path=None
) -> SearchResult:
    """Budgeted log-uniform random search.

    train_fn(params) must return (metrics, payload) where metrics contains
    "shape3d_mm" and "reprojection_px" measured on validation data. A
    failing trial is logged and skipped. Selection minimizes the 1:1 sum of
    both metrics after normalizing each by its mean over successful trials.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4_040_404]))
    names = sorted(space.bounds)
    trials: list[Trial] = []
    log_f = open(log_path, "w") if log_path else None
    if log_f:
        log_f.write(
            json.dumps(
                {
                    "format": "morphloss-trials",
                    "version": 1,
                    "bounds": {k: list(v) for k, v in space.bounds.items()},
                    "budget": space.budget,
                    "selection": "normalized shape3d_mm + reprojection_px, 1:1",
                    "seed": seed,
                }
            )
            + "\n"
        )
    try:
        for k in range(space.budget):
            params = {}
            for name in names:
                lo, hi = space.bounds[name]
                params[name] = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
            t0 = time.perf_counter()
            try:
                metrics, payload = train_fn(params)
                trial = Trial(
                    index=k,
                    params=params,
                    metrics=dict(metrics),
                    wall_s=time.perf_counter() - t0,
                    status="ok",
                    payload=payload,
                )
            except MorphlossError as exc:
                trial = Trial(
                    index=k,
                    params=params,
                    metrics=None,
                    wall_s=time.perf_counter() - t0,
                    status=f"failed: {exc}",
                )
            trials.append(trial)
            if log_f:
                log_f.write(
                    json.dumps(
                        {
                            "trial": trial.index,
                            "params": trial.params,
                            "metrics": trial.metrics,
                            "wall_time": trial.wall_s,
                            "status": trial.status,
                        }
                    )
                    + "\n"
                )
    finally:
        if log_f:
            log_f.close()

    ok = [t for t in trials if t.status == "ok"]
    if not ok:
        raise SearchFailed("all trials failed")
    shape_mean = float(np.mean([t.metrics["shape3d_mm"] for t in ok]))
    repr_mean = float(np.mean([t.metrics["reprojection_px"] for t in ok]))

    def composite(t: Trial) -> float:
        s = t.metrics["shape3d_mm"] / shape_mean if shape_mean > 0 else 0.0
        r = t.metrics["reprojection_px"] / repr_mean if repr_mean > 0 else 0.0
        return s + r

    best = min(ok, key=composite)
    return SearchResult(best=best, trials=trials)
