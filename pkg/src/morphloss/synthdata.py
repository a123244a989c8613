"""Synthetic scene generation: subjects, per-view camera poses, and noisy
2D landmark observations standing in for rendered images.

Determinism contract: a dataset is a pure function of (model, config, seed).
Per-subject randomness derives from SeedSequence(seed, subject index), so
generation order never changes the result.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import MorphlossError
from .geometry import (
    Calibration,
    CameraPose,
    Quaternion,
    Shape,
    default_calibration,
    project,
    ypr_to_quaternion,
)
from .morphable import (
    MorphableModel,
    ShapeParams,
    model_digest,
    sample_params,
    select_landmarks,
    synthesize,
)

SCENES_FORMAT = "morphloss-scenes"
SCENES_VERSION = 1


class PoseSampling(MorphlossError):
    """Could not draw an in-frustum pose within the retry budget."""


class NotSymmetrizable(MorphlossError):
    """Model lacks a full left-right vertex pairing."""


@dataclass(frozen=True)
class PoseRanges:
    """Camera angle ranges (degrees) and translation distribution (cm)."""

    yaw: tuple[float, float] = (-90.0, 90.0)
    pitch: tuple[float, float] = (-30.0, 30.0)
    roll: tuple[float, float] = (-15.0, 15.0)
    t_mean: tuple[float, float, float] = (0.0, 0.0, -60.0)
    t_sigma: tuple[float, float, float] = (2.0, 2.0, 5.0)


@dataclass(frozen=True)
class DatasetConfig:
    n_train: int = 200
    n_val: int = 30
    n_test: int = 60
    views_mean: float = 4.4
    n_landmarks: int = 32
    noise_px: float = 1.0
    pose_ranges: PoseRanges = PoseRanges()

    def total_subjects(self) -> int:
        return self.n_train + self.n_val + self.n_test


@dataclass(frozen=True)
class View:
    pose: CameraPose
    observations: np.ndarray = field(repr=False)  # flat (2L,): u0, v0, u1, v1, ...

    def __post_init__(self):
        obs = np.array(self.observations, dtype=float).reshape(-1)
        if not np.all(np.isfinite(obs)):
            raise ValueError("observations contain non-finite values")
        obs.setflags(write=False)
        object.__setattr__(self, "observations", obs)


@dataclass(frozen=True)
class Scene:
    subject_id: str
    gt_params: ShapeParams
    gt_shape: Shape
    views: tuple[View, ...]


@dataclass
class Dataset:
    """In-memory dataset plus the metadata needed to reproduce it."""

    model_hash: str
    config: DatasetConfig
    calibration: Calibration
    landmarks: tuple[int, ...]
    train: list[Scene]
    val: list[Scene]
    test: list[Scene]
    seed: int = 0

    def split(self, name: str) -> list[Scene]:
        try:
            return {"train": self.train, "val": self.val, "test": self.test}[name]
        except KeyError:
            raise ValueError(f"unknown split {name!r}") from None


def sample_view_pose(rng: np.random.Generator, ranges: PoseRanges) -> CameraPose:
    yaw = rng.uniform(*ranges.yaw)
    pitch = rng.uniform(*ranges.pitch)
    roll = rng.uniform(*ranges.roll)
    t = np.asarray(ranges.t_mean) + rng.normal(0.0, 1.0, 3) * np.asarray(
        ranges.t_sigma
    )
    return CameraPose(ypr_to_quaternion(yaw, pitch, roll), t)


def _pose_in_frustum(pose: CameraPose, shape: Shape, landmarks, w_min=1e-6) -> bool:
    pts = shape.points[list(landmarks)]
    cam_z = pts @ pose.rotation()[2] + pose.t[2]
    return bool(np.all(np.abs(cam_z) > w_min))


def _subject_views(shape, landmarks, calib, cfg, rng):
    base = int(cfg.views_mean)
    frac = cfg.views_mean - base
    n_views = base + (1 if rng.random() < frac else 0)
    n_views = max(1, n_views)
    views = []
    for _ in range(n_views):
        for attempt in range(100):
            pose = sample_view_pose(rng, cfg.pose_ranges)
            if _pose_in_frustum(pose, shape, landmarks):
                break
        else:
            raise PoseSampling("no in-frustum pose found in 100 attempts")
        exact = project(calib, pose, shape)[list(landmarks)]
        noisy = exact + rng.normal(0.0, cfg.noise_px, exact.shape)
        views.append(View(pose=pose, observations=noisy.reshape(-1)))
    return tuple(views)


def generate_dataset(
    model: MorphableModel,
    config: DatasetConfig,
    seed: int,
    calibration: Calibration | None = None,
) -> Dataset:
    """Generate train/val/test scenes; split assignment is by subject."""
    calib = calibration or default_calibration()
    landmarks = select_landmarks(model.mean, model.symmetry_pairs, config.n_landmarks)

    scenes = []
    for idx in range(config.total_subjects()):
        rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
        params = sample_params(model, rng)
        shape = synthesize(model, params)
        views = _subject_views(shape, landmarks, calib, config, rng)
        scenes.append(
            Scene(
                subject_id=f"subj{idx:05d}",
                gt_params=params,
                gt_shape=shape,
                views=views,
            )
        )

    a, b = config.n_train, config.n_train + config.n_val
    return Dataset(
        model_hash=model_digest(model),
        config=config,
        calibration=calib,
        landmarks=landmarks,
        train=scenes[:a],
        val=scenes[a:b],
        test=scenes[b:],
        seed=seed,
    )


def _symmetry_permutation(model: MorphableModel) -> np.ndarray:
    if not model.symmetry_pairs:
        raise NotSymmetrizable("model carries no symmetry pairing")
    n = model.n_points
    perm = np.full(n, -1, dtype=int)
    for i, j in model.symmetry_pairs:
        perm[i] = j
        perm[j] = i
    if np.any(perm < 0):
        raise NotSymmetrizable("symmetry pairing does not cover every vertex")
    return perm


def symmetrize(scene: Scene, model: MorphableModel, calibration: Calibration,
               landmarks) -> Scene:
    """Mirror a scene about the x = 0 plane.

    Shape coordinates are reflected and paired vertex indices swapped so the
    result is a valid same-topology shape; poses map as
    q -> (w, x, -y, -z), t -> (-tx, ty, tz); observation u coordinates map
    to 2 cx - u with slots permuted to follow their mirrored landmarks.
    Applying the operation twice returns the original.
    """
    perm = _symmetry_permutation(model)
    mirrored_pts = scene.gt_shape.points[perm] * np.array([-1.0, 1.0, 1.0])
    new_shape = Shape(mirrored_pts)

    # mirrored identity coefficients: least squares onto the basis (the
    # mirrored shape of a model-generated shape stays in the model span
    # whenever the basis itself is symmetry-closed; fall back to projection)
    resid = mirrored_pts.reshape(-1) - model.mean.flat
    new_alpha = model.basis.T @ resid

    lm = list(landmarks)
    try:
        lm_perm = [lm.index(int(perm[i])) for i in lm]
    except ValueError:
        raise NotSymmetrizable("landmark set is not closed under the pairing")

    new_views = []
    for view in scene.views:
        q = view.pose.q
        new_q = Quaternion(q.w, q.x, -q.y, -q.z)
        new_t = view.pose.t * np.array([-1.0, 1.0, 1.0])
        obs = view.observations.reshape(-1, 2)[lm_perm].copy()
        obs[:, 0] = 2.0 * calibration.cx - obs[:, 0]
        new_views.append(View(CameraPose(new_q, new_t), obs.reshape(-1)))

    sid = scene.subject_id
    sid = sid[: -len("_mir")] if sid.endswith("_mir") else sid + "_mir"
    return Scene(
        subject_id=sid,
        gt_params=ShapeParams(new_alpha),
        gt_shape=new_shape,
        views=tuple(new_views),
    )


# ---------------------------------------------------------------------------
# JSON-lines persistence
# ---------------------------------------------------------------------------


def _scene_to_dict(scene: Scene) -> dict:
    return {
        "subject_id": scene.subject_id,
        "gt_params": scene.gt_params.alpha.tolist(),
        "gt_shape": scene.gt_shape.flat.tolist(),
        "views": [
            {
                "q": [v.pose.q.w, v.pose.q.x, v.pose.q.y, v.pose.q.z],
                "t": v.pose.t.tolist(),
                "obs": v.observations.tolist(),
            }
            for v in scene.views
        ],
    }


def _scene_from_dict(d: dict) -> Scene:
    views = tuple(
        View(
            pose=CameraPose(Quaternion(*v["q"]), np.asarray(v["t"], dtype=float)),
            observations=np.asarray(v["obs"], dtype=float),
        )
        for v in d["views"]
    )
    return Scene(
        subject_id=d["subject_id"],
        gt_params=ShapeParams(np.asarray(d["gt_params"], dtype=float)),
        gt_shape=Shape(np.asarray(d["gt_shape"], dtype=float).reshape(-1, 3)),
        views=views,
    )


def _header(dataset: Dataset, split: str) -> dict:
    cfg = asdict(dataset.config)
    cfg["pose_ranges"] = asdict(dataset.config.pose_ranges)
    return {
        "format": SCENES_FORMAT,
        "version": SCENES_VERSION,
        "split": split,
        "model_hash": dataset.model_hash,
        "seed": dataset.seed,
        "config": cfg,
        "calibration": asdict(dataset.calibration),
        "landmarks": list(dataset.landmarks),
    }


def save_dataset(dataset: Dataset, out_dir) -> list[str]:
    """Write one JSON-lines file per split; returns the file paths."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for split in ("train", "val", "test"):
        path = os.path.join(out_dir, f"{split}.jsonl")
        with open(path, "w") as f:
            f.write(json.dumps(_header(dataset, split)) + "\n")
            for scene in dataset.split(split):
                f.write(json.dumps(_scene_to_dict(scene)) + "\n")
        paths.append(path)
    return paths


def load_dataset(out_dir) -> Dataset:
    import os

    splits = {}
    header = None
    for split in ("train", "val", "test"):
        path = os.path.join(out_dir, f"{split}.jsonl")
        with open(path) as f:
            first = json.loads(f.readline())
            if first.get("format") != SCENES_FORMAT:
                raise ValueError(f"{path} is not a {SCENES_FORMAT} file")
            header = first
            splits[split] = [_scene_from_dict(json.loads(line)) for line in f]
    cfg = dict(header["config"])
    cfg["pose_ranges"] = PoseRanges(
        **{k: tuple(v) if isinstance(v, list) else v
           for k, v in cfg["pose_ranges"].items()}
    )
    config = DatasetConfig(**cfg)
    calib = Calibration(**header["calibration"])
    return Dataset(
        model_hash=header["model_hash"],
        config=config,
        calibration=calib,
        landmarks=tuple(header["landmarks"]),
        train=splits["train"],
        val=splits["val"],
        test=splits["test"],
        seed=int(header.get("seed", 0)),
    )


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
