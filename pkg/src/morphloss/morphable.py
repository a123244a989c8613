"""Linear statistical shape model: construction, synthesis, sampling, I/O.

The model is x = mean + basis @ alpha with unit-norm basis columns and the
per-mode variances kept separately, so sampling draws alpha_i ~ N(0, var_i).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MorphlossError
from .geometry import Shape

MODEL_FORMAT = "morphloss-model"
MODEL_VERSION = 1


class ParamDimension(MorphlossError):
    """Coefficient vector length does not match the model."""


class DegenerateGeometry(MorphlossError):
    """A shape has no spatial extent, alignment is undefined."""


class RankDeficient(MorphlossError):
    """More components requested than the data can support."""


@dataclass(frozen=True)
class ShapeParams:
    """Identity coefficients in the model's basis."""

    alpha: np.ndarray = field(repr=False)

    def __post_init__(self):
        a = np.array(self.alpha, dtype=float).reshape(-1)
        if not np.all(np.isfinite(a)):
            raise ValueError("coefficients must be finite")
        a.setflags(write=False)
        object.__setattr__(self, "alpha", a)

    def __len__(self) -> int:
        return self.alpha.shape[0]


@dataclass(frozen=True)
class MorphableModel:
    mean: Shape
    basis: np.ndarray = field(repr=False)  # (3N, B), unit-norm orthogonal columns
    eigenvalues: np.ndarray = field(repr=False)  # (B,), non-increasing variances
    symmetry_pairs: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        basis = np.array(self.basis, dtype=float)
        eig = np.array(self.eigenvalues, dtype=float)
        n3 = 3 * self.mean.n_points
        if basis.ndim != 2 or basis.shape[0] != n3:
            raise ValueError(f"basis must be ({n3}, B), got {basis.shape}")
        b = basis.shape[1]
        if b > n3:
            raise ValueError("more basis columns than coordinates")
        if eig.shape != (b,):
            raise ValueError("eigenvalues length must match basis columns")
        if np.any(eig < -1e-12) or np.any(np.diff(eig) > 1e-12):
            raise ValueError("eigenvalues must be non-negative and non-increasing")
        gram = basis.T @ basis
        off = gram - np.diag(np.diag(gram))
        if b > 0 and np.max(np.abs(off)) > 1e-8:
            raise ValueError("basis columns are not mutually orthogonal")
        pairs = tuple((int(i), int(j)) for i, j in self.symmetry_pairs)
        for i, j in pairs:
            if not (0 <= i < self.mean.n_points and 0 <= j < self.mean.n_points):
                raise ValueError(f"symmetry pair ({i}, {j}) out of range")
        basis.setflags(write=False)
        eig.setflags(write=False)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "eigenvalues", np.maximum(eig, 0.0))
        object.__setattr__(self, "symmetry_pairs", pairs)

    @property
    def n_points(self) -> int:
        return self.mean.n_points

    @property
    def n_components(self) -> int:
        return self.basis.shape[1]


def synthesize(model: MorphableModel, params: ShapeParams) -> Shape:
    """mean + basis @ alpha, reshaped to points. Linear in alpha."""
    if len(params) != model.n_components:
        raise ParamDimension(
            f"expected {model.n_components} coefficients, got {len(params)}"
        )
    flat = model.mean.flat + model.basis @ params.alpha
    return Shape(flat.reshape(-1, 3))


def kabsch_rotation(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Optimal rotation R minimizing ||R s_i - t_i||^2 over centered point sets."""
    h = source.T @ target
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    return vt.T @ np.diag([1.0, 1.0, d]) @ u.T


def procrustes_align(shapes) -> list[Shape]:
    """Generalized Procrustes alignment, rotation + translation only.

    Each shape is centered on its own centroid, then iteratively rotated
    onto the evolving mean until the mean moves less than 1e-8 RMS or 100
    iterations pass. Scale is deliberately preserved.
    """
    shapes = list(shapes)
    if len(shapes) < 2:
        raise ValueError("need at least two shapes")
    n = shapes[0].n_points
    if any(s.n_points != n for s in shapes):
        raise ValueError("all shapes must share the same point count")
    centered = []
    for k, s in enumerate(shapes):
        pts = s.points - s.centroid()
        if float(np.max(np.abs(pts))) < 1e-12:
            raise DegenerateGeometry(f"shape {k} has all points coincident")
        centered.append(pts)
    centered = np.stack(centered)

    mean = centered.mean(axis=0)
    for _ in range(100):
        for k in range(centered.shape[0]):
            r = kabsch_rotation(centered[k], mean)
            centered[k] = centered[k] @ r.T
        new_mean = centered.mean(axis=0)
        delta = math.sqrt(float(np.mean((new_mean - mean) ** 2)))
        mean = new_mean
        if delta < 1e-8:
            break
    return [Shape(c) for c in centered]


def build_model(aligned, n_components: int, symmetry_pairs=()) -> MorphableModel:
    """PCA over aligned shapes via the snapshot (Gram matrix) method.

    Eigenvalues are the sample variances (ddof=1) of the training set along
    each basis column. Directions whose variance is numerically zero are
    filled with a deterministic orthonormal completion.
    """
    aligned = list(aligned)
    s = len(aligned)
    if s < 1:
        raise ValueError("need at least one shape")
    n3 = 3 * aligned[0].n_points
    if n_components > s - 1 or n_components > n3:
        raise RankDeficient(
            f"{n_components} components requested from {s} shapes ({n3} coords)"
        )
    data = np.stack([sh.flat for sh in aligned])
    mean = data.mean(axis=0)
    dc = data - mean

    gram = dc @ dc.T
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]

    tol = max(1e-12, 1e-12 * float(evals[0]) if evals.size else 0.0)
    cols = []
    variances = []
    for i in range(n_components):
        lam = float(evals[i]) if i < evals.size else 0.0
        if lam > tol:
            direction = dc.T @ evecs[:, i]
            cols.append(direction / np.linalg.norm(direction))
            variances.append(lam / (s - 1) if s > 1 else 0.0)
        else:
            cols.append(None)
            variances.append(0.0)

    _fill_completion(cols, n3)
    basis = np.column_stack(cols) if cols else np.zeros((n3, 0))
    return MorphableModel(
        mean=Shape(mean.reshape(-1, 3)),
        basis=basis,
        eigenvalues=np.array(variances),
        symmetry_pairs=tuple(symmetry_pairs),
    )


def _fill_completion(cols, dim):
    """Replace None slots with unit vectors orthogonal to everything else."""
    have = [c for c in cols if c is not None]
    j = 0
    for i, c in enumerate(cols):
        if c is not None:
            continue
        while j < dim:
            cand = np.zeros(dim)
            cand[j] = 1.0
            j += 1
            for h in have:
                cand -= (cand @ h) * h
            nrm = np.linalg.norm(cand)
            if nrm > 0.5:
                cand /= nrm
                cols[i] = cand
                have.append(cand)
                break
        else:
            raise RankDeficient("cannot complete an orthonormal basis")


def sample_params(model: MorphableModel, rng: np.random.Generator) -> ShapeParams:
    """Draw alpha_i ~ N(0, eigenvalue_i), independent per mode."""
    std = np.sqrt(model.eigenvalues)
    return ShapeParams(rng.normal(0.0, 1.0, size=model.n_components) * std)


# ---------------------------------------------------------------------------
# Synthetic template and scan generation
# ---------------------------------------------------------------------------


def face_template(n_points: int = 512, seed: int = 0):
    """Deterministic face-like point cloud with exact left-right pairing.

    A front half-ellipsoid with a protruding nose bump; layout is
    [midline | right half | mirrored left half] so mirroring is an index
    permutation. Returns (Shape, symmetry_pairs). The centroid sits at the
    origin and the nose points toward -z, matching the scene convention.
    """
    if n_points < 16:
        raise ValueError("template needs at least 16 points")
    n_mid = max(8, round(n_points / 16))
    if (n_points - n_mid) % 2 != 0:
        n_mid += 1
    n_half = (n_points - n_mid) // 2

    # midline arc, forehead -> nose -> chin, x exactly 0
    t = np.linspace(-1.25, 1.25, n_mid)
    mid_dirs = np.column_stack([np.zeros(n_mid), np.sin(t), -np.cos(t)])

    # quasi-uniform directions on the front-right quarter via a Fibonacci lattice
    m = 64 * n_points
    k = np.arange(m)
    phi = (1 + math.sqrt(5)) / 2
    zs = 1 - 2 * (k + 0.5) / m
    theta = 2 * math.pi * k / phi
    rad = np.sqrt(np.maximum(0.0, 1 - zs**2))
    cand = np.column_stack([rad * np.cos(theta), rad * np.sin(theta), zs])
    keep = (cand[:, 0] > 0.04) & (cand[:, 2] < -0.04)
    cand = cand[keep]
    if cand.shape[0] < n_half:
        raise ValueError("not enough candidate directions; raise the lattice size")
    pick = np.linspace(0, cand.shape[0] - 1, n_half).round().astype(int)
    right_dirs = cand[pick]

    dirs = np.vstack([mid_dirs, right_dirs])
    semi = np.array([6.5, 8.5, 5.0])  # cm half-extents: width, height, depth
    pts = dirs * semi

    # nose bump, centered on the midline so mirroring keeps it symmetric
    nose = np.array([0.0, -0.30, -1.0])
    nose /= np.linalg.norm(nose)
    ang = np.arccos(np.clip(dirs @ nose, -1.0, 1.0))
    pts = pts + 2.2 * np.exp(-((ang / 0.35) ** 2))[:, None] * dirs

    left = pts[n_mid:] * np.array([-1.0, 1.0, 1.0])
    all_pts = np.vstack([pts, left])
    all_pts -= all_pts.mean(axis=0)

    pairs = [(i, i) for i in range(n_mid)]
    pairs += [(n_mid + n_half + k, n_mid + k) for k in range(n_half)]
    return Shape(all_pts), tuple(pairs)


def select_landmarks(template: Shape, pairs, count: int = 32) -> tuple[int, ...]:
    """Deterministic, mirror-closed landmark subset via farthest-point sampling.

    Sampling runs over midline points and one representative per mirror
    pair; selecting a paired point pulls in its partner, so the landmark
    set is closed under the template's symmetry.
    """
    partner = {}
    for i, j in pairs:
        partner[i] = j
        partner[j] = i
    mid = sorted({i for i, j in pairs if i == j})
    rights = sorted({min(i, j) for i, j in pairs if i != j})
    reps = mid + rights
    if count > len(mid) + 2 * len(rights):
        raise ValueError("landmark count exceeds available vertices")

    mid_quota = min(4, len(mid), count)
    if (count - mid_quota) % 2 != 0:
        mid_quota = min(mid_quota + 1, len(mid), count)
    if (count - mid_quota) % 2 != 0:
        raise ValueError("cannot satisfy landmark count with this pairing")
    pair_quota = (count - mid_quota) // 2

    pts = template.points
    start = mid[int(np.argmin(pts[mid, 2]))]  # nose tip: most protruding midline point
    chosen: list[int] = []
    mid_used = 0
    pair_used = 0
    dist = np.full(len(reps), np.inf)
    rep_arr = np.array(reps)
    current = reps.index(start)
    while mid_used < mid_quota or pair_used < pair_quota:
        idx = rep_arr[current]
        is_mid = partner[idx] == idx
        took = False
        if is_mid and mid_used < mid_quota:
            chosen.append(idx)
            mid_used += 1
            took = True
        elif not is_mid and pair_used < pair_quota:
            chosen.extend([idx, partner[idx]])
            pair_used += 1
            took = True
        if took:
            d = np.linalg.norm(pts[rep_arr] - pts[idx], axis=1)
            dist = np.minimum(dist, d)
        dist[current] = -np.inf  # taken or category exhausted: never revisit
        if mid_used >= mid_quota and pair_used >= pair_quota:
            break
        current = int(np.argmax(dist))
        if not np.isfinite(dist[current]):
            raise ValueError("ran out of candidates while selecting landmarks")
    return tuple(sorted(chosen))


def random_scan_set(
    template: Shape,
    n_subjects: int,
    rng: np.random.Generator,
    scale_sigma=(0.10, 0.08, 0.15),
    n_bumps: int = 6,
    bump_amp: float = 0.5,
    jitter: float = 0.05,
    max_rigid_deg: float = 40.0,
    max_rigid_shift: float = 3.0,
) -> list[Shape]:
    """Synthetic "scans": per-axis scaled, smoothly deformed, rigidly moved
    copies of the template.

    Per-axis log-normal scaling makes overall size and aspect genuinely
    variable across subjects, so the PCA basis spans size/flatness modes.
    Bump fields are evaluated in (|x|, y, z) so deformations stay
    left-right symmetric; a small jitter adds realistic asymmetry.
    """
    base = template.points
    sym = np.abs(base) * np.array([1.0, 0.0, 0.0]) + base * np.array([0.0, 1.0, 1.0])
    out = []
    for _ in range(n_subjects):
        scale = np.exp(rng.normal(0.0, np.asarray(scale_sigma)))
        pts = base * scale
        for _ in range(n_bumps):
            center = sym[rng.integers(0, base.shape[0])]
            amp = rng.normal(0.0, bump_amp)
            width = rng.uniform(1.5, 4.0)
            d2 = np.sum((sym - center) ** 2, axis=1)
            radial = base / np.maximum(np.linalg.norm(base, axis=1, keepdims=True), 1e-9)
            pts = pts + amp * np.exp(-d2 / (2 * width**2))[:, None] * radial
        pts = pts + rng.normal(0.0, jitter, size=pts.shape)

        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = math.radians(rng.uniform(0.0, max_rigid_deg))
        w = math.cos(angle / 2)
        xyz = math.sin(angle / 2) * axis
        q = np.array([w, *xyz])
        r = _quat_array_to_rotation(q)
        shift = rng.uniform(-max_rigid_shift, max_rigid_shift, size=3)
        out.append(Shape(pts @ r.T + shift))
    return out


def _quat_array_to_rotation(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def model_to_dict(model: MorphableModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "n_points": model.n_points,
        "n_components": model.n_components,
        "mean": model.mean.flat.tolist(),
        "basis": model.basis.reshape(-1).tolist(),  # row-major
        "eigenvalues": model.eigenvalues.tolist(),
        "symmetry_pairs": [list(p) for p in model.symmetry_pairs],
    }


def model_from_dict(d: dict) -> MorphableModel:
    if d.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a {MODEL_FORMAT} file")
    n = int(d["n_points"])
    b = int(d["n_components"])
    mean = np.asarray(d["mean"], dtype=float).reshape(n, 3)
    basis = np.asarray(d["basis"], dtype=float).reshape(3 * n, b)
    return MorphableModel(
        mean=Shape(mean),
        basis=basis,
        eigenvalues=np.asarray(d["eigenvalues"], dtype=float),
        symmetry_pairs=tuple(tuple(p) for p in d["symmetry_pairs"]),
    )


def save_model(model: MorphableModel, path) -> None:
    with open(path, "w") as f:
        json.dump(model_to_dict(model), f)


def load_model(path) -> MorphableModel:
    with open(path) as f:
        return model_from_dict(json.load(f))


def model_digest(model: MorphableModel) -> str:
    """Stable content hash used to tie datasets to the model they came from."""
    payload = json.dumps(model_to_dict(model), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()
