"""Synthetic misalignment generation.

Dense registration needs pixel-level ground truth, which real visible-thermal
rigs rarely provide.  This module manufactures it: starting from an aligned
pair, sample a random geometric transform, resample the thermal image through
it, and keep the displacement field as supervision.  Three families of
increasing flexibility are supported: affine, homography, and thin-plate
spline.

Conventions.  A transform maps reference (output) pixels to source positions,
so warping is a single gather.  The displacement field it induces,
``flow(p) = T(p) - p``, plays a double role: it turns the aligned thermal
image into the misaligned one, and it is exactly what the network must
predict to pull the visible image onto the misaligned thermal grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .decompose import Image, box_filter
from .errors import ContractError, DataError, NumericError, SchemaError
from .fileio import read_flo, read_png, write_flo, write_png
from .flow import FlowField, grid_coords
from .netops import grid_sample

KINDS = ("affine", "homography", "tps")

# Perturbation ranges at magnitude 1; all shrink linearly with magnitude.
# Chosen so that most of the frame stays visible at full strength.
ROTATION_RANGE = np.deg2rad(10.0)
SCALE_RANGE = 0.15
SHEAR_RANGE = np.deg2rad(5.0)
TRANSLATION_RANGE = 0.10
CORNER_RANGE = 0.12
TPS_RANGE = 0.08
TPS_GRID = 4
TPS_REG = 1e-6

DET_FLOOR = 1e-8
MAX_DRAWS = 10

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


@dataclass
class TransformSpec:
    """One sampled geometric transform in reference-to-source direction.

    ``params`` holds plain JSON-ready lists: a 2x3 matrix for affine, a 3x3
    matrix (last entry 1) for homography, and control points plus a
    regularizer for thin-plate spline.
    """

    kind: str
    params: dict
    magnitude: float
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown transform kind {self.kind!r}")

    def validate(self) -> None:
        if self.kind == "tps":
            src = np.asarray(self.params["source"], dtype=np.float64)
            dst = np.asarray(self.params["target"], dtype=np.float64)
            if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
                raise ContractError(f"control point shapes differ: {src.shape} vs {dst.shape}")
            if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
                raise NumericError("non-finite control points")
            if self.params["reg"] <= 0.0:
                raise ContractError("thin-plate regularizer must be positive")
            return
        mat = np.asarray(self.params["matrix"], dtype=np.float64)
        want = (2, 3) if self.kind == "affine" else (3, 3)
        if mat.shape != want:
            raise ContractError(f"{self.kind} matrix must be {want}, got {mat.shape}")
        if not np.all(np.isfinite(mat)):
            raise NumericError(f"non-finite {self.kind} matrix")
        square = mat[:, :2] if self.kind == "affine" else mat
        if abs(np.linalg.det(square)) <= DET_FLOOR:
            raise NumericError(f"{self.kind} matrix is not invertible")

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (N, 2) reference (x, y) points into the source image."""
        pts = np.asarray(points, dtype=np.float64)
        if self.kind == "affine":
            mat = np.asarray(self.params["matrix"], dtype=np.float64)
            return pts @ mat[:, :2].T + mat[:, 2]
        if self.kind == "homography":
            mat = np.asarray(self.params["matrix"], dtype=np.float64)
            homo = np.concatenate([pts, np.ones((pts.shape[0], 1))], axis=1) @ mat.T
            return homo[:, :2] / homo[:, 2:3]
        src = np.asarray(self.params["source"], dtype=np.float64)
        dst = np.asarray(self.params["target"], dtype=np.float64)
        return pts + tps_displacement(src, dst - src, self.params["reg"], pts)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "params": self.params,
            "magnitude": self.magnitude,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "TransformSpec":
        try:
            spec = cls(
                kind=payload["kind"],
                params=payload["params"],
                magnitude=payload["magnitude"],
                seed=payload.get("seed"),
            )
        except KeyError as exc:
            raise SchemaError(f"transform spec missing field {exc}") from None
        spec.validate()
        return spec


def affine_matrix(theta, scale, shear, tx, ty, h, w) -> np.ndarray:
    """2x3 matrix: rotate, shear, and scale about the image center, then
    translate.  All-zero arguments with unit scale give the exact identity."""
    cos, sin = np.cos(theta), np.sin(theta)
    rot = np.array([[cos, -sin], [sin, cos]])
    shr = np.array([[1.0, np.tan(shear)], [0.0, 1.0]])
    lin = rot @ shr * scale
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    offset = center - lin @ center + np.array([tx, ty])
    return np.concatenate([lin, offset[:, None]], axis=1)


def _normalized(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Hartley conditioning: centroid at origin, RMS radius sqrt(2).
    center = points.mean(axis=0)
    shifted = points - center
    rms = np.sqrt((shifted**2).sum(axis=1).mean())
    s = np.sqrt(2.0) / max(rms, 1e-12)
    t = np.array([[s, 0.0, -s * center[0]], [0.0, s, -s * center[1]], [0.0, 0.0, 1.0]])
    return shifted * s, t


def fit_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 matrix with bottom-right entry 1 mapping four points onto four
    targets, solved as the exactly determined eight-unknown linear system."""
    src_n, t_src = _normalized(np.asarray(src, dtype=np.float64))
    dst_n, t_dst = _normalized(np.asarray(dst, dtype=np.float64))
    rows, rhs = [], []
    for (x, y), (u, v) in zip(src_n, dst_n):
        rows.append([x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y])
        rhs.append(u)
        rows.append([0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y])
        rhs.append(v)
    try:
        sol = np.linalg.solve(np.array(rows), np.array(rhs))
    except np.linalg.LinAlgError:
        raise NumericError("degenerate correspondences in homography fit") from None
    mat = np.linalg.inv(t_dst) @ np.append(sol, 1.0).reshape(3, 3) @ t_src
    return mat / mat[2, 2]


def _tps_kernel(d2: np.ndarray) -> np.ndarray:
    # r^2 log r, written on squared distances to dodge the r = 0 singularity
    out = np.zeros_like(d2)
    mask = d2 > 0.0
    out[mask] = 0.5 * d2[mask] * np.log(d2[mask])
    return out


def tps_displacement(source, disp, reg, points) -> np.ndarray:
    """Evaluate the thin-plate interpolant of per-control-point displacements.

    Solves the classic augmented system (radial kernel plus a degree-one
    polynomial, ``reg`` on the kernel diagonal) and evaluates at ``points``.
    Zero displacements yield exactly zero everywhere.
    """
    source = np.asarray(source, dtype=np.float64)
    disp = np.asarray(disp, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    n = source.shape[0]
    d2 = ((source[:, None, :] - source[None, :, :]) ** 2).sum(axis=2)
    system = np.zeros((n + 3, n + 3))
    system[:n, :n] = _tps_kernel(d2) + reg * np.eye(n)
    system[:n, n] = 1.0
    system[:n, n + 1 :] = source
    system[n, :n] = 1.0
    system[n + 1 :, :n] = source.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = disp
    try:
        sol = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError:
        raise NumericError("singular thin-plate system; control points may coincide") from None
    weights, poly = sol[:n], sol[n:]
    q2 = ((points[:, None, :] - source[None, :, :]) ** 2).sum(axis=2)
    return _tps_kernel(q2) @ weights + poly[0] + points @ poly[1:]


def _draw_params(kind: str, magnitude: float, h: int, w: int, rng: np.random.Generator) -> dict:
    side = float(min(h, w))
    if kind == "affine":
        theta = rng.uniform(-ROTATION_RANGE * magnitude, ROTATION_RANGE * magnitude)
        scale = rng.uniform(1.0 - SCALE_RANGE * magnitude, 1.0 + SCALE_RANGE * magnitude)
        shear = rng.uniform(-SHEAR_RANGE * magnitude, SHEAR_RANGE * magnitude)
        tmax = TRANSLATION_RANGE * side * magnitude
        tx, ty = rng.uniform(-tmax, tmax, size=2)
        return {"matrix": affine_matrix(theta, scale, shear, tx, ty, h, w).tolist()}
    if kind == "homography":
        corners = np.array([[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]])
        jmax = CORNER_RANGE * side * magnitude
        jitter = rng.uniform(-jmax, jmax, size=(4, 2))
        if np.all(jitter == 0.0):
            return {"matrix": np.eye(3).tolist()}
        return {"matrix": fit_homography(corners, corners + jitter).tolist()}
    xs = np.linspace(0.0, w - 1.0, TPS_GRID)
    ys = np.linspace(0.0, h - 1.0, TPS_GRID)
    gx, gy = np.meshgrid(xs, ys)
    source = np.stack([gx.ravel(), gy.ravel()], axis=1)
    dmax = TPS_RANGE * side * magnitude
    target = source + rng.uniform(-dmax, dmax, size=source.shape)
    return {"source": source.tolist(), "target": target.tolist(), "reg": TPS_REG}


def sample_transform(kind: str, magnitude: float, hw: tuple, rng: np.random.Generator) -> TransformSpec:
    """Draw a random transform of the requested kind.

    ``magnitude`` in [0, 1] scales every perturbation range linearly, with
    zero giving the exact identity.  ``kind`` may also be ``mixed``, which
    picks a family at random.  Degenerate draws are retried a few times.
    """
    if not 0.0 <= magnitude <= 1.0:
        raise ContractError(f"magnitude must lie in [0, 1], got {magnitude}")
    if kind == "mixed":
        kind = KINDS[rng.integers(len(KINDS))]
    if kind not in KINDS:
        raise ContractError(f"unknown transform kind {kind!r}")
    h, w = hw
    for _ in range(MAX_DRAWS):
        spec = TransformSpec(kind=kind, params=_draw_params(kind, magnitude, h, w, rng), magnitude=magnitude)
        try:
            spec.validate()
        except NumericError:
            continue
        return spec
    raise NumericError(f"no invertible {kind} transform after {MAX_DRAWS} draws")


def transform_to_flow(spec: TransformSpec, h: int, w: int) -> FlowField:
    """Dense displacement field flow(p) = T(p) - p on the (h, w) grid."""
    pts = grid_coords(h, w)
    return FlowField((spec.apply(pts) - pts).T.reshape(2, h, w), scale=1)


def warp_image(img: Image, flow: FlowField) -> Image:
    """Resample so that output(p) = bilinear(img, p + flow(p)), border-clamped."""
    _, h, w = img.shape
    if flow.data.shape[1:] != (h, w):
        raise ContractError(f"flow shape {flow.data.shape} does not match image {img.shape}")
    base = grid_coords(h, w).T.reshape(2, h, w)
    out = grid_sample(Tensor(img.data), Tensor(base + flow.data))
    return Image(out.data, modality=img.modality)


@dataclass
class Triplet:
    """One training example: an untouched visible image, a thermal image
    resampled through a random transform, and the field that realigns them."""

    visible: Image
    warped_thermal: Image
    gt_flow: FlowField
    spec: TransformSpec
    seed: int


def generate_triplet(visible: Image, thermal: Image, kind: str, magnitude: float, seed: int) -> Triplet:
    """Build one misaligned pair from an aligned one, deterministically in
    the seed."""
    if visible.shape != thermal.shape:
        raise ContractError(f"aligned pair shapes differ: {visible.shape} vs {thermal.shape}")
    _, h, w = visible.shape
    rng = np.random.default_rng(seed)
    spec = sample_transform(kind, magnitude, (h, w), rng)
    spec.seed = seed
    gt_flow = transform_to_flow(spec, h, w)
    return Triplet(
        visible=visible,
        warped_thermal=warp_image(thermal, gt_flow),
        gt_flow=gt_flow,
        spec=spec,
        seed=seed,
    )


def make_aligned_scene(seed: int, hw: tuple) -> tuple[Image, Image]:
    """Procedural aligned visible/thermal pair for tests and demos.

    Both modalities share the same geometry (a background gradient plus
    random rectangles and disks) but render it with independent intensities,
    so correspondence is only recoverable from structure, as in real
    cross-modal imagery.  Light blurring and noise keep the statistics away
    from degenerate flat regions.
    """
    h, w = hw
    rng = np.random.default_rng(seed)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    gx = xs / max(w - 1, 1)
    gy = ys / max(h - 1, 1)

    vis = np.empty((3, h, w))
    for c in range(3):
        cx, cy = rng.uniform(-0.25, 0.25, size=2)
        vis[c] = 0.5 + cx * (gx - 0.5) + cy * (gy - 0.5)
    cx, cy = rng.uniform(-0.25, 0.25, size=2)
    thr = np.broadcast_to(0.5 + cx * (gx - 0.5) + cy * (gy - 0.5), (3, h, w)).copy()

    side = min(h, w)
    for _ in range(8):
        shape_kind = rng.integers(2)
        px = rng.uniform(0.1 * w, 0.9 * w)
        py = rng.uniform(0.1 * h, 0.9 * h)
        if shape_kind == 0:
            r = rng.uniform(0.06, 0.22) * side
            mask = (xs - px) ** 2 + (ys - py) ** 2 <= r * r
        else:
            rx, ry = rng.uniform(0.05, 0.2, size=2) * side
            mask = (np.abs(xs - px) <= rx) & (np.abs(ys - py) <= ry)
        vcol = rng.uniform(0.05, 0.95, size=3)
        tval = rng.uniform(0.05, 0.95)
        for c in range(3):
            vis[c][mask] = vcol[c]
        thr[:, mask] = tval

    for c in range(3):
        for _ in range(2):
            vis[c] = box_filter(vis[c], 1)
            thr[c] = box_filter(thr[c], 1)
    vis += rng.normal(0.0, 0.01, size=vis.shape)
    thr += rng.normal(0.0, 0.01, size=thr.shape)
    return (
        Image(np.clip(vis, 0.0, 1.0), modality="visible"),
        Image(np.clip(thr, 0.0, 1.0), modality="thermal"),
    )


def write_triplet(pair_dir, triplet: Triplet) -> None:
    pair_dir = Path(pair_dir)
    pair_dir.mkdir(parents=True, exist_ok=True)
    write_png(pair_dir / "visible.png", triplet.visible.data)
    write_png(pair_dir / "thermal.png", triplet.warped_thermal.data)
    write_flo(pair_dir / "gt.flo", triplet.gt_flow.data)
    text = json.dumps(triplet.spec.to_json(), indent=2, sort_keys=True)
    (pair_dir / "spec.json").write_text(text + "\n")


def read_triplet(pair_dir) -> Triplet:
    pair_dir = Path(pair_dir)
    spec_path = pair_dir / "spec.json"
    if not spec_path.exists():
        raise DataError(f"missing transform spec: {spec_path}")
    try:
        spec = TransformSpec.from_json(json.loads(spec_path.read_text()))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"transform spec is not valid JSON: {exc}") from None
    visible = Image(read_png(pair_dir / "visible.png"), modality="visible")
    thermal = Image(read_png(pair_dir / "thermal.png"), modality="thermal")
    gt_flow = FlowField(read_flo(pair_dir / "gt.flo"), scale=1)
    if visible.shape != thermal.shape or gt_flow.data.shape[1:] != visible.shape[1:]:
        raise DataError(f"inconsistent pair contents in {pair_dir}")
    return Triplet(visible, thermal, gt_flow, spec, spec.seed if spec.seed is not None else 0)


@dataclass
class PairJob:
    """Everything a worker needs to synthesize and write one pair.

    Scenes come either from aligned image files or, when the paths are None,
    from the procedural generator seeded by ``scene_seed``.
    """

    out_dir: str
    pair_id: str
    scene_seed: int
    hw: tuple
    kind: str
    magnitude: float
    seed: int
    split: str
    visible_path: str | None = None
    thermal_path: str | None = None


def run_pair_job(job: PairJob) -> dict:
    """Generate one triplet, write it under pairs/<id>, return its manifest row."""
    if job.visible_path is not None:
        visible = Image(read_png(job.visible_path), modality="visible")
        thermal = Image(read_png(job.thermal_path), modality="thermal")
    else:
        visible, thermal = make_aligned_scene(job.scene_seed, job.hw)
    triplet = generate_triplet(visible, thermal, job.kind, job.magnitude, job.seed)
    write_triplet(Path(job.out_dir) / "pairs" / job.pair_id, triplet)
    return {
        "id": job.pair_id,
        "split": job.split,
        "kind": triplet.spec.kind,
        "magnitude": job.magnitude,
        "seed": job.seed,
        "scene_seed": job.scene_seed,
    }


def make_jobs(
    out_dir,
    n_pairs: int,
    hw: tuple,
    kind: str = "mixed",
    magnitude: float = 0.5,
    seed: int = 0,
    test_fraction: float = 0.0,
    n_scenes: int = 4,
    source_pairs=None,
) -> list:
    """Plan a dataset: one job per pair with deterministic ids and seeds.

    ``source_pairs`` is an optional list of (visible_path, thermal_path)
    tuples; pairs cycle over it, or over ``n_scenes`` procedural scenes.
    The last ``test_fraction`` of pairs form the test split.
    """
    if n_pairs < 1:
        raise ContractError("need at least one pair")
    if not 0.0 <= test_fraction <= 1.0:
        raise ContractError(f"test fraction must lie in [0, 1], got {test_fraction}")
    n_test = int(round(n_pairs * test_fraction))
    jobs = []
    for i in range(n_pairs):
        job = PairJob(
            out_dir=str(out_dir),
            pair_id=f"{i:06d}",
            # offset keeps scene seeds clear of the per-pair transform seeds
            scene_seed=seed + 100_000 + (i % n_scenes),
            hw=tuple(hw),
            kind=kind,
            magnitude=magnitude,
            seed=seed + i,
            split="test" if i >= n_pairs - n_test else "train",
        )
        if source_pairs:
            vis, thr = source_pairs[i % len(source_pairs)]
            job.visible_path, job.thermal_path = str(vis), str(thr)
        jobs.append(job)
    return jobs


def build_dataset(out_dir, jobs, workers: int = 1) -> dict:
    """Run the jobs, optionally in a process pool, and write the manifest.

    Manifest rows follow job order regardless of completion order, so the
    output is byte-identical for any worker count.
    """
    out_dir = Path(out_dir)
    (out_dir / "pairs").mkdir(parents=True, exist_ok=True)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_pair_job, jobs))
    else:
        rows = [run_pair_job(job) for job in jobs]
    manifest = {"version": MANIFEST_VERSION, "pairs": rows}
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"missing manifest: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"manifest is not valid JSON: {exc}") from None
    if manifest.get("version") != MANIFEST_VERSION or "pairs" not in manifest:
        raise SchemaError(f"unsupported manifest in {path}")
    return manifest


def load_dataset(dataset_dir, split: str | None = None) -> list:
    """Read every triplet listed in the manifest, optionally one split only."""
    dataset_dir = Path(dataset_dir)
    manifest = load_manifest(dataset_dir)
    rows = [r for r in manifest["pairs"] if split is None or r.get("split") == split]
    return [read_triplet(dataset_dir / "pairs" / row["id"]) for row in rows]
