"""Three-headed regressor on landmark observations, Adam, training loop.

The network is a small tanh MLP encoder with separate shape/quaternion/
translation heads. The decode from coefficients to 3D points is the frozen
morphable-model basis and never enters the optimizer; losses chain through
it analytically. Heads are initialized so that, before any training, every
input maps to the mean shape placed at the canonical pose.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import MorphlossError
from .geometry import Calibration
from .losses import (
    GroundTruth,
    LossReport,
    MultitermWeights,
    Prediction,
    ViewSet,
    coarse_loss,
    gal_loss,
    mrl_loss,
    srl_loss,
    xqt_loss,
)
from .morphable import MorphableModel
from .synthdata import Dataset, PoseRanges, Scene, sample_view_pose

INIT_QUAT = np.array([1.0, 0.0, 0.0, 0.0])
INIT_T = np.array([0.0, 0.0, -60.0])

LOSS_NAMES = ("gal", "srl", "mrl", "coarse", "xqt")
HYPERPARAMETER_FREE = ("gal", "srl", "mrl")


class NonFiniteGradient(MorphlossError):
    """A gradient block went NaN or infinite during optimization."""


class TrainingAborted(MorphlossError):
    """A loss evaluation failed mid-epoch; message carries the sample id."""


@dataclass
class TrainConfig:
    loss: str
    epochs: int
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0
    weights: MultitermWeights | None = None
    n_views: int = 2
    view_ranges: PoseRanges = field(default_factory=PoseRanges)
    clip_norm: float = 10.0
    hidden: int = 128
    head_hidden: int = 256

    def __post_init__(self):
        if self.loss not in LOSS_NAMES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.loss == "mrl" and self.n_views < 1:
            raise ValueError("mrl needs at least one view")
        if self.loss in ("coarse", "xqt") and self.weights is None:
            raise ValueError(f"{self.loss} requires multiterm weights")


@dataclass
class RegressorModel:
    params: dict[str, np.ndarray]
    n_landmarks: int
    n_components: int
    obs_center: np.ndarray
    obs_scale: float
    # frozen decode, shared with the morphable model and never optimized
    decode_mean: np.ndarray = field(repr=False)
    decode_basis: np.ndarray = field(repr=False)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    wall_s: float
    clipped_batches: int


@dataclass
class TrainingHistory:
    epochs: list[EpochStats] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"epochs": [asdict(e) for e in self.epochs]}


def _layer_keys(prefix):
    return [f"{prefix}.w0", f"{prefix}.b0", f"{prefix}.w1", f"{prefix}.b1"]


def init_model(
    model: MorphableModel,
    seed: int,
    n_landmarks: int,
    calibration: Calibration,
    hidden: int = 128,
    head_hidden: int = 256,
) -> RegressorModel:
    """Build the regressor with head outputs pinned to the canonical pose.

    Hidden weights use scaled-uniform fan-in init; every final layer starts
    with zero weights and a bias equal to the target output, so the
    initial prediction is exactly (alpha = 0, q = (1,0,0,0), t = (0,0,-60))
    regardless of the input.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7_070_707]))
    d_in = 2 * n_landmarks

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    params = {
        "enc.w0": uniform((hidden, d_in), d_in),
        "enc.b0": np.zeros(hidden),
        "enc.w1": uniform((hidden, hidden), hidden),
        "enc.b1": np.zeros(hidden),
    }
    heads = {
        "s": (model.n_components, np.zeros(model.n_components)),
        "q": (4, INIT_QUAT.copy()),
        "t": (3, INIT_T.copy()),
    }
    for name, (out_dim, bias) in heads.items():
        params[f"{name}.w0"] = uniform((head_hidden, hidden), hidden)
        params[f"{name}.b0"] = np.zeros(head_hidden)
        params[f"{name}.w1"] = np.zeros((out_dim, head_hidden))
        params[f"{name}.b1"] = bias

    return RegressorModel(
        params=params,
        n_landmarks=n_landmarks,
        n_components=model.n_components,
        obs_center=np.array([calibration.cx, calibration.cy]),
        obs_scale=calibration.width / 2.0,
        decode_mean=model.mean.flat,
        decode_basis=model.basis,
    )


def _normalize_obs(reg: RegressorModel, obs: np.ndarray) -> np.ndarray:
    centered = obs.reshape(obs.shape[0], -1, 2) - reg.obs_center
    return centered.reshape(obs.shape[0], -1) / reg.obs_scale


def forward(reg: RegressorModel, obs: np.ndarray):
    """Batch forward pass; obs is (n, 2L). Returns outputs and the cache
    needed for backward."""
    p = reg.params
    xin = _normalize_obs(reg, obs)
    h0 = np.tanh(xin @ p["enc.w0"].T + p["enc.b0"])
    h1 = np.tanh(h0 @ p["enc.w1"].T + p["enc.b1"])
    cache = {"xin": xin, "h0": h0, "h1": h1}
    outs = {}
    for name in ("s", "q", "t"):
        hh = np.tanh(h1 @ p[f"{name}.w0"].T + p[f"{name}.b0"])
        outs[name] = hh @ p[f"{name}.w1"].T + p[f"{name}.b1"]
        cache[f"hh_{name}"] = hh
    return outs["s"], outs["q"], outs["t"], cache


def backward(reg: RegressorModel, cache, g_alpha, g_qraw, g_t):
    """Backpropagate per-sample output gradients to every parameter."""
    p = reg.params
    grads = {}
    g_feat = np.zeros_like(cache["h1"])
    for name, g_out in (("s", g_alpha), ("q", g_qraw), ("t", g_t)):
        hh = cache[f"hh_{name}"]
        grads[f"{name}.w1"] = g_out.T @ hh
        grads[f"{name}.b1"] = g_out.sum(axis=0)
        g_hh = g_out @ p[f"{name}.w1"]
        g_zh = g_hh * (1.0 - hh**2)
        grads[f"{name}.w0"] = g_zh.T @ cache["h1"]
        grads[f"{name}.b0"] = g_zh.sum(axis=0)
        g_feat += g_zh @ p[f"{name}.w0"]

    g_z1 = g_feat * (1.0 - cache["h1"] ** 2)
    grads["enc.w1"] = g_z1.T @ cache["h0"]
    grads["enc.b1"] = g_z1.sum(axis=0)
    g_h0 = g_z1 @ p["enc.w1"]
    g_z0 = g_h0 * (1.0 - cache["h0"] ** 2)
    grads["enc.w0"] = g_z0.T @ cache["xin"]
    grads["enc.b0"] = g_z0.sum(axis=0)
    return grads


def predict(reg: RegressorModel, obs: np.ndarray) -> Prediction:
    alpha, qraw, t, _ = forward(reg, np.asarray(obs, dtype=float).reshape(1, -1))
    return Prediction(alpha=alpha[0], q_raw=qraw[0], t=t[0])


def adam_init(params, lr: float = 1e-4) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
        lr=lr,
    )


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update. Returns (new state, new params).

    The frozen decode never appears in `params`, so it is untouched by
    construction.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in block {name!r}")
    t = state.step + 1
    new_m, new_v, new_p = {}, {}, {}
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.beta1 * state.m[name] + (1 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        new_m[name] = m
        new_v[name] = v
        new_p[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return (
        AdamState(
            m=new_m, v=new_v, step=t, lr=state.lr,
            beta1=state.beta1, beta2=state.beta2, eps=state.eps,
        ),
        new_p,
    )


def sample_viewset(rng: np.random.Generator, ranges: PoseRanges, n_views: int) -> ViewSet:
    views = []
    for _ in range(n_views):
        for _attempt in range(100):
            pose = sample_view_pose(rng, ranges)
            if pose.t[2] <= -15.0:
                views.append(pose)
                break
        else:
            raise MorphlossError("could not sample an in-frustum virtual view")
    return ViewSet(tuple(views))


def evaluate_loss(
    config: TrainConfig,
    model: MorphableModel,
    calib: Calibration,
    pred: Prediction,
    gt: GroundTruth,
    views: ViewSet | None = None,
) -> LossReport:
    """Dispatch one sample through the configured loss."""
    if config.loss == "gal":
        return gal_loss(model, pred, gt)
    if config.loss == "srl":
        return srl_loss(model, calib, pred, gt)
    if config.loss == "mrl":
        if views is None:
            raise ValueError("mrl needs a ViewSet")
        return mrl_loss(model, calib, pred, gt, views)
    if config.loss == "coarse":
        return coarse_loss(model, pred, gt, config.weights)
    return xqt_loss(model, pred, gt, config.weights)


def _collect_samples(scenes: list[Scene]):
    return [(s, v) for s in scenes for v in range(len(s.views))]


def _epoch_pass(
    reg, state, model, calib, config, samples, rng_views, train: bool
):
    """Run one pass over samples; updates parameters when train is True.
    Returns (loss mean, clipped batch count, new reg/state)."""
    n = len(samples)
    order = np.arange(n)
    total = 0.0
    clipped = 0
    bs = config.batch_size if train else max(config.batch_size, 256)
    for start in range(0, n, bs):
        batch = order[start : start + bs]
        obs = np.stack([samples[i][0].views[samples[i][1]].observations for i in batch])
        alpha, qraw, t, cache = forward(reg, obs)
        nb = len(batch)
        g_a = np.zeros_like(alpha)
        g_q = np.zeros_like(qraw)
        g_t = np.zeros_like(t)
        for row, i in enumerate(batch):
            scene, view_idx = samples[i]
            view = scene.views[view_idx]
            pred = Prediction(alpha=alpha[row], q_raw=qraw[row], t=t[row])
            gt = GroundTruth(scene.gt_shape, view.pose)
            viewset = None
            if config.loss == "mrl":
                viewset = sample_viewset(rng_views, config.view_ranges, config.n_views)
            try:
                rep = evaluate_loss(config, model, calib, pred, gt, viewset)
            except MorphlossError as exc:
                raise TrainingAborted(
                    f"loss failed at subject {scene.subject_id} "
                    f"view {view_idx}: {exc}"
                ) from exc
            total += rep.value
            if train:
                g_a[row] = rep.grad_alpha / nb
                g_q[row] = rep.grad_qraw / nb
                g_t[row] = rep.grad_t / nb
        if train:
            grads = backward(reg, cache, g_a, g_q, g_t)
            gnorm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if gnorm > config.clip_norm:
                scale = config.clip_norm / gnorm
                grads = {k: g * scale for k, g in grads.items()}
                clipped += 1
            state, new_params = adam_step(state, reg.params, grads)
            reg.params = new_params
    return total / max(n, 1), clipped, reg, state


def train(
    model: MorphableModel, dataset: Dataset, config: TrainConfig
) -> tuple[RegressorModel, TrainingHistory]:
    """Seeded minibatch training; every (scene, view) pair is one sample.

    Validation is evaluated with the same loss each epoch and never feeds
    gradients. History wall times are measured and therefore the one field
    that is not reproducible across runs.
    """
    if not dataset.train:
        raise ValueError("dataset has no training scenes")
    calib = dataset.calibration
    reg = init_model(
        model, config.seed, len(dataset.landmarks), calib,
        hidden=config.hidden, head_hidden=config.head_hidden,
    )
    state = adam_init(reg.params, lr=config.lr)
    train_samples = _collect_samples(dataset.train)
    val_samples = _collect_samples(dataset.val)
    history = TrainingHistory()

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        rng_shuffle = np.random.default_rng(
            np.random.SeedSequence([config.seed, 1001, epoch])
        )
        perm = rng_shuffle.permutation(len(train_samples))
        shuffled = [train_samples[i] for i in perm]
        rng_views = np.random.default_rng(
            np.random.SeedSequence([config.seed, 2002, epoch])
        )
        train_loss, clipped, reg, state = _epoch_pass(
            reg, state, model, calib, config, shuffled, rng_views, train=True
        )
        rng_val = np.random.default_rng(
            np.random.SeedSequence([config.seed, 3003, epoch])
        )
        val_loss, _, reg, state = _epoch_pass(
            reg, state, model, calib, config, val_samples, rng_val, train=False
        )
        history.epochs.append(
            EpochStats(
                epoch=epoch,
                train_loss=train_loss,
                val_loss=val_loss,
                wall_s=time.perf_counter() - t0,
                clipped_batches=clipped,
            )
        )
    return reg, history


# ---------------------------------------------------------------------------
# Checkpoints: JSON header + little-endian float64 parameter blocks
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "morphloss-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, reg: RegressorModel, epoch: int = 0, extra: dict | None = None):
    """Single-file checkpoint: u32 header length, JSON header, raw blocks.

    Content is a pure function of the parameters, so two identical
    trainings produce byte-identical files.
    """
    import json as _json

    names = sorted(reg.params)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "n_landmarks": reg.n_landmarks,
        "n_components": reg.n_components,
        "obs_center": reg.obs_center.tolist(),
        "obs_scale": reg.obs_scale,
        "blocks": [{"name": n, "shape": list(reg.params[n].shape)} for n in names],
    }
    if extra:
        header["extra"] = extra
    blob = _json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(len(blob).to_bytes(4, "little"))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(reg.params[n], dtype="<f8").tobytes())


def load_checkpoint(path, model: MorphableModel) -> RegressorModel:
    import json as _json

    with open(path, "rb") as f:
        hlen = int.from_bytes(f.read(4), "little")
        header = _json.loads(f.read(hlen).decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a {CHECKPOINT_FORMAT} file")
        params = {}
        for block in header["blocks"]:
            shape = tuple(block["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape)
            params[block["name"]] = data.astype(float)
    return RegressorModel(
        params=params,
        n_landmarks=int(header["n_landmarks"]),
        n_components=int(header["n_components"]),
        obs_center=np.asarray(header["obs_center"], dtype=float),
        obs_scale=float(header["obs_scale"]),
        decode_mean=model.mean.flat,
        decode_basis=model.basis,
    )
