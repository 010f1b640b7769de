"""Synthetic ray-cast scenes, reconstruction/segmentation metrics and the
throughput benchmark."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, EmptyDomainError, ShapeError
from .rangeview import HIGH_RES, LOW_RES, PointCloud, ProjectionConfig, RangeImage, pixel_directions, project, unproject
from .sampling import RowSelection, apply, uniform_selection
from .segment import GROUND, OBSTACLE, UNLABELED, LabelImage, SegmenterConfig, make_segmenter
from .solver import SolverConfig, initial_estimate, residual, superresolve


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]


@dataclass(frozen=True)
class Wall:
    """Vertical rectangle facing the sensor.

    ``distance`` is measured along the azimuth ``azimuth_deg``; ``extent`` is
    the wall's full width. It rises from ``base`` to ``top`` (meters, z).
    """

    distance: float
    extent: float
    azimuth_deg: float = 0.0
    base: float = -3.0
    top: float = 3.0


@dataclass(frozen=True)
class SceneSpec:
    ground_height: float | None = -2.0
    boxes: tuple[Box, ...] = ()
    walls: tuple[Wall, ...] = ()
    noise_sigma: float = 0.0
    seed: int = 0
    max_range: float = 120.0

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "walls", tuple(self.walls))
        if self.ground_height is not None and self.ground_height >= 0:
            raise ConfigError("ground plane must lie below the sensor")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        for b in self.boxes:
            if min(b.size) <= 0:
                raise ConfigError("box sizes must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        d = dict(d)
        d["boxes"] = tuple(Box(tuple(b["center"]), tuple(b["size"])) for b in d.get("boxes", ()))
        d["walls"] = tuple(Wall(**w) for w in d.get("walls", ()))
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def random_scene(seed: int, noise_sigma: float = 0.02, n_boxes: tuple[int, int] = (2, 6)) -> SceneSpec:
    """A piecewise-planar street-like scene: ground, boxes and maybe walls."""
    rng = np.random.default_rng(seed)
    h = -rng.uniform(1.6, 2.2)
    boxes = []
    for _ in range(rng.integers(n_boxes[0], n_boxes[1] + 1)):
        dist = rng.uniform(8.0, 40.0)
        az = rng.uniform(-math.pi, math.pi)
        size = (rng.uniform(1.0, 4.5), rng.uniform(1.0, 2.5), rng.uniform(0.8, 2.5))
        boxes.append(Box((dist * math.cos(az), dist * math.sin(az), h + size[2] / 2), size))
    walls = []
    for _ in range(rng.integers(0, 3)):
        walls.append(Wall(rng.uniform(25.0, 60.0), rng.uniform(10.0, 40.0), rng.uniform(-180.0, 180.0), h, h + rng.uniform(2.0, 6.0)))
    return SceneSpec(h, tuple(boxes), tuple(walls), noise_sigma, seed)


def _raycast(spec: SceneSpec, dirs: np.ndarray):
    """Nearest hit distance and primitive id per ray. Id 0 ground, 1.. boxes, then walls."""
    n = dirs.shape[0]
    best = np.full(n, np.inf)
    hit_id = np.full(n, -1)

    def take(t, pid):
        better = t < best
        best[better] = t[better]
        hit_id[better] = pid

    with np.errstate(divide="ignore", invalid="ignore"):
        if spec.ground_height is not None:
            dz = dirs[:, 2]
            t = np.where(dz < 0, spec.ground_height / dz, np.inf)
            take(t, 0)
        for i, box in enumerate(spec.boxes):
            c = np.asarray(box.center, dtype=np.float64)
            half = 0.5 * np.asarray(box.size, dtype=np.float64)
            t1 = (c - half) / dirs
            t2 = (c + half) / dirs
            tmin = np.nanmax(np.minimum(t1, t2), axis=1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=1)
            t = np.where((tmax >= tmin) & (tmin > 0), tmin, np.inf)
            take(t, 1 + i)
        for j, wall in enumerate(spec.walls):
            a = math.radians(wall.azimuth_deg)
            normal = np.array([math.cos(a), math.sin(a), 0.0])
            lateral = np.array([-math.sin(a), math.cos(a), 0.0])
            un = dirs @ normal
            t = np.where(un > 0, wall.distance / un, np.inf)
            p = dirs * t[:, None]
            inside = (np.abs(p @ lateral) <= wall.extent / 2) & (p[:, 2] >= wall.base) & (p[:, 2] <= wall.top)
            take(np.where(inside, t, np.inf), 1 + len(spec.boxes) + j)
    best[best > spec.max_range] = np.inf
    hit_id[~np.isfinite(best)] = -1
    return best, hit_id


def render_scene(spec: SceneSpec, cfg: ProjectionConfig = HIGH_RES, noise: bool = True) -> tuple[RangeImage, LabelImage]:
    """Ray-cast one ray per pixel center. Noise (if any) is truncated at 3 sigma."""
    dirs = pixel_directions(cfg).reshape(-1, 3)
    t, pid = _raycast(spec, dirs)
    valid = np.isfinite(t)
    rng_img = np.where(valid, t, -1.0)
    if noise and spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        e = np.clip(rng.normal(0.0, spec.noise_sigma, size=t.shape), -3 * spec.noise_sigma, 3 * spec.noise_sigma)
        rng_img = np.where(valid, np.maximum(t + e, 0.5 * t), -1.0)
    labels = np.where(pid == 0, GROUND, np.where(pid > 0, OBSTACLE, UNLABELED))
    instance = np.where(pid > 0, pid, 0)
    img = RangeImage(cfg, rng_img.reshape(cfg.shape), valid.reshape(cfg.shape))
    return img, LabelImage(cfg, labels.reshape(cfg.shape), instance.reshape(cfg.shape))


def generate_scene(spec: SceneSpec, cfg: ProjectionConfig = HIGH_RES, stamp: int = 0) -> tuple[PointCloud, LabelImage]:
    img, labels = render_scene(spec, cfg)
    return unproject(img, stamp=stamp), labels


def generate_low_res_scan(spec: SceneSpec, sel: RowSelection, cfg: ProjectionConfig = HIGH_RES, stamp: int = 0) -> PointCloud:
    """A sparse scan whose beams sit exactly on the selected high-res rows."""
    img, _ = render_scene(spec, cfg)
    keep = np.zeros(cfg.height, dtype=bool)
    keep[sel.index] = True
    mask = img.valid & keep[:, None]
    return unproject(RangeImage(cfg, img.range, mask), stamp=stamp)


def _joint(pred: RangeImage, gt: RangeImage, scope: str, sel: RowSelection | None):
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {gt.shape}")
    m = pred.valid & gt.valid
    if scope == "unobserved-rows":
        if sel is None:
            raise ConfigError("scope 'unobserved-rows' needs a row selection")
        rows = np.ones(pred.shape[0], dtype=bool)
        rows[sel.index] = False
        m &= rows[:, None]
    elif scope != "all":
        raise ConfigError(f"unknown scope {scope!r}")
    if not m.any():
        raise EmptyDomainError("no pixel is valid in both images within scope")
    return pred.range[m] - gt.range[m]


def mae(pred: RangeImage, gt: RangeImage, scope: str = "all", sel: RowSelection | None = None) -> float:
    return float(np.mean(np.abs(_joint(pred, gt, scope, sel))))


def rmse(pred: RangeImage, gt: RangeImage, scope: str = "all", sel: RowSelection | None = None) -> float:
    d = _joint(pred, gt, scope, sel)
    return float(np.sqrt(np.mean(d * d)))


def iou(pred: LabelImage, gt: LabelImage) -> dict[int, float]:
    """Per-class IoU over pixels labeled in both images."""
    if pred.labels.shape != gt.labels.shape:
        raise ShapeError("label grids differ in size")
    both = (pred.labels != UNLABELED) & (gt.labels != UNLABELED)
    p = pred.labels[both]
    g = gt.labels[both]
    out = {}
    for c in np.union1d(np.unique(p), np.unique(g)):
        inter = np.count_nonzero((p == c) & (g == c))
        union = np.count_nonzero((p == c) | (g == c))
        out[int(c)] = inter / union
    return out


def residual_norm(S: RangeImage, T_hat: RangeImage, sel: RowSelection) -> float:
    return residual(S, T_hat, sel)


@dataclass
class MetricReport:
    mae: float | None = None
    rmse: float | None = None
    residual: float | None = None
    iou_per_class: dict[int, float] = field(default_factory=dict)
    fps: float | None = None

    def to_json(self) -> str:
        d = asdict(self)
        d["iou_per_class"] = {str(k): v for k, v in self.iou_per_class.items()}
        return json.dumps(d, indent=2, sort_keys=True)


@dataclass
class FrameTimer:
    """Per-stage wall-clock samples for the project -> SR -> segment chain."""

    samples: dict[str, list[float]] = field(default_factory=lambda: {"project": [], "sr": [], "segment": [], "total": []})

    def summary(self) -> dict:
        out = {}
        for k, v in self.samples.items():
            a = np.asarray(v)
            out[k] = {"mean": float(a.mean()), "p50": float(np.percentile(a, 50)), "p95": float(np.percentile(a, 95))}
        return out


def process_scan(cloud: PointCloud, sel: RowSelection, solver_cfg: SolverConfig, segmenter, low_cfg: ProjectionConfig = LOW_RES, timer: FrameTimer | None = None):
    """The full per-scan chain shared by the benchmark and the pipeline."""
    t0 = time.perf_counter()
    S = project(cloud, low_cfg)
    t1 = time.perf_counter()
    T_hat, state = superresolve(S, sel, solver_cfg)
    t2 = time.perf_counter()
    labels = segmenter(T_hat)
    t3 = time.perf_counter()
    if timer is not None:
        timer.samples["project"].append(t1 - t0)
        timer.samples["sr"].append(t2 - t1)
        timer.samples["segment"].append(t3 - t2)
        timer.samples["total"].append(t3 - t0)
    return S, T_hat, labels, state


def bench_throughput(
    n_scans: int,
    solver_cfg: SolverConfig | None = None,
    seg_cfg: SegmenterConfig | None = None,
    low_cfg: ProjectionConfig = LOW_RES,
    high_cfg: ProjectionConfig = HIGH_RES,
    seed: int = 0,
) -> dict:
    """Frames per second over the full chain on generated 16-beam scans.

    Scan generation is excluded from the timing.
    """
    if n_scans < 1:
        raise ConfigError("n_scans must be at least 1")
    solver_cfg = solver_cfg or SolverConfig()
    sel = uniform_selection(high_cfg.height, low_cfg.height)
    segmenter = make_segmenter("geometric", seg_cfg)
    scans = [generate_low_res_scan(random_scene(seed + i), sel, high_cfg) for i in range(n_scans)]
    timer = FrameTimer()
    for cloud in scans:
        process_scan(cloud, sel, solver_cfg, segmenter, low_cfg, timer)
    lat = np.asarray(timer.samples["total"])
    fps = 1.0 / lat
    return {
        "n_scans": n_scans,
        "fps_mean": float(n_scans / lat.sum()),
        "fps_p50": float(np.percentile(fps, 50)),
        "fps_p95": float(np.percentile(fps, 95)),
        "latency_mean_s": float(lat.mean()),
        "stages": timer.summary(),
    }


def sr_vs_baseline(seed: int, solver_cfg: SolverConfig | None = None, noise_sigma: float = 0.02, cfg: ProjectionConfig = HIGH_RES, stride: int = 4):
    """MAE on unobserved rows for the solver and for plain row replication."""
    spec = random_scene(seed, noise_sigma)
    truth, _ = render_scene(spec, cfg, noise=False)
    noisy, _ = render_scene(spec, cfg)
    sel = uniform_selection(cfg.height, cfg.height // stride)
    S = apply(noisy, sel)
    solver_cfg = solver_cfg or SolverConfig()
    T_hat, state = superresolve(S, sel, solver_cfg)
    base = initial_estimate(S, sel, "replicate-rows")
    return {
        "seed": seed,
        "mae_sr": mae(T_hat, truth, "unobserved-rows", sel),
        "mae_baseline": mae(base, truth, "unobserved-rows", sel),
        "residual_history": state.residual_history,
    }
