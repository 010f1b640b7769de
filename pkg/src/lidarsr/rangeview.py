"""Spherical projection between point clouds and range images.

Conventions: x forward, y left, z up. Column 0 sits at azimuth +pi (behind
the sensor, sweeping through the left side), column W/2 looks straight
ahead. Row 0 is the highest elevation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, ShapeError

logger = logging.getLogger(__name__)

INVALID_RANGE = -1.0


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Point:
    x: float
    y: float
    z: float
    intensity: float = 0.0


@dataclass(frozen=True)
class ProjectionConfig:
    height: int = 64
    width: int = 1024
    fov_up: float = 15.0
    fov_down: float = -15.0

    def __post_init__(self):
        if int(self.height) != self.height or self.height < 1:
            raise ConfigError(f"height must be a positive integer, got {self.height}")
        if int(self.width) != self.width or self.width < 1:
            raise ConfigError(f"width must be a positive integer, got {self.width}")
        if not (math.isfinite(self.fov_up) and math.isfinite(self.fov_down)):
            raise ConfigError("field of view must be finite")
        if self.fov_up <= self.fov_down:
            raise ConfigError(f"fov_up ({self.fov_up}) must exceed fov_down ({self.fov_down})")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def fov_up_rad(self) -> float:
        return math.radians(self.fov_up)

    @property
    def fov_down_rad(self) -> float:
        return math.radians(self.fov_down)

    @property
    def fov_rad(self) -> float:
        return self.fov_up_rad - self.fov_down_rad

    def with_height(self, height: int) -> ProjectionConfig:
        return ProjectionConfig(height, self.width, self.fov_up, self.fov_down)

    def row_elevations(self) -> np.ndarray:
        """Elevation (radians) of every row center, top row first."""
        rows = np.arange(self.height, dtype=np.float64)
        return self.fov_down_rad + (1.0 - (rows + 0.5) / self.height) * self.fov_rad

    def col_azimuths(self) -> np.ndarray:
        """Azimuth (radians) of every column center."""
        cols = np.arange(self.width, dtype=np.float64)
        return np.pi * (1.0 - 2.0 * (cols + 0.5) / self.width)


LOW_RES = ProjectionConfig(height=16)
HIGH_RES = ProjectionConfig(height=64)


@dataclass(frozen=True)
class PointCloud:
    """Ordered set of returns. ``labels``/``instances`` are set on segmented clouds."""

    xyz: np.ndarray
    intensity: np.ndarray
    stamp: int = 0
    frame_id: str = "lidar"
    labels: np.ndarray | None = None
    instances: np.ndarray | None = None

    def __post_init__(self):
        xyz = np.asarray(self.xyz)
        if xyz.size == 0:
            xyz = xyz.reshape(0, 3)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise ShapeError(f"xyz must be (N, 3), got {xyz.shape}")
        if not np.issubdtype(xyz.dtype, np.floating):
            xyz = xyz.astype(np.float64)
        intensity = np.asarray(self.intensity, dtype=xyz.dtype).reshape(-1)
        if intensity.shape[0] != xyz.shape[0]:
            raise ShapeError("intensity length must match point count")
        object.__setattr__(self, "xyz", _frozen(xyz))
        object.__setattr__(self, "intensity", _frozen(intensity))
        for name in ("labels", "instances"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.uint16).reshape(-1)
            if arr.shape[0] != xyz.shape[0]:
                raise ShapeError(f"{name} length must match point count")
            object.__setattr__(self, name, _frozen(arr))

    @classmethod
    def empty(cls, **kw) -> PointCloud:
        return cls(np.zeros((0, 3)), np.zeros(0), **kw)

    @classmethod
    def from_points(cls, points, **kw) -> PointCloud:
        """Build from ``Point`` objects or rows of (x, y, z[, intensity])."""
        rows = [(p.x, p.y, p.z, p.intensity) if isinstance(p, Point) else p for p in points]
        arr = np.asarray(rows, dtype=getattr(points, "dtype", np.float64))
        if arr.size == 0:
            return cls.empty(**kw)
        if arr.ndim != 2 or arr.shape[1] not in (3, 4):
            raise ShapeError(f"expected rows of 3 or 4 values, got shape {arr.shape}")
        inten = arr[:, 3] if arr.shape[1] == 4 else np.zeros(len(arr), dtype=arr.dtype)
        return cls(arr[:, :3], inten, **kw)

    def __len__(self) -> int:
        return self.xyz.shape[0]

    @property
    def points(self) -> np.ndarray:
        """(N, 4) array of x, y, z, intensity."""
        return np.column_stack([self.xyz, self.intensity])

    def point(self, i: int) -> Point:
        x, y, z = (float(v) for v in self.xyz[i])
        return Point(x, y, z, float(self.intensity[i]))


@dataclass(frozen=True)
class RangeImage:
    config: ProjectionConfig
    range: np.ndarray
    valid: np.ndarray
    intensity: np.ndarray | None = None

    def __post_init__(self):
        shape = self.config.shape
        rng = np.array(self.range, dtype=np.float64)
        valid = np.array(self.valid, dtype=bool)
        if rng.shape != shape or valid.shape != shape:
            raise ShapeError(f"grids must be {shape}, got range {rng.shape} and mask {valid.shape}")
        if np.any(~(rng[valid] > 0)) or not np.all(np.isfinite(rng[valid])):
            raise DomainError("valid pixels must hold finite positive ranges")
        rng[~valid] = INVALID_RANGE
        object.__setattr__(self, "range", _frozen(rng))
        object.__setattr__(self, "valid", _frozen(valid))
        if self.intensity is not None:
            inten = np.array(self.intensity, dtype=np.float64)
            if inten.shape != shape:
                raise ShapeError("intensity grid must match config")
            inten[~valid] = 0.0
            object.__setattr__(self, "intensity", _frozen(inten))

    @classmethod
    def invalid(cls, config: ProjectionConfig) -> RangeImage:
        return cls(config, np.full(config.shape, INVALID_RANGE), np.zeros(config.shape, dtype=bool))

    @classmethod
    def from_values(cls, config: ProjectionConfig, values, valid=None, intensity=None) -> RangeImage:
        """Wrap a plain array; every pixel is valid unless a mask is given."""
        values = np.asarray(values, dtype=np.float64)
        if valid is None:
            valid = np.ones(values.shape, dtype=bool)
        return cls(config, np.where(valid, values, INVALID_RANGE), valid, intensity)

    @property
    def shape(self) -> tuple[int, int]:
        return self.config.shape

    @property
    def occupancy(self) -> int:
        return int(self.valid.sum())

    def values(self) -> np.ndarray:
        """Ranges with invalid pixels zeroed, for linear algebra on the mask."""
        return np.where(self.valid, self.range, 0.0)


@dataclass
class ProjectionReport:
    projected: int = 0
    skipped: int = 0
    collisions: int = 0
    skipped_indices: list = field(default_factory=list)


def _norm(xyz: np.ndarray) -> np.ndarray:
    # Fixed summation order: unproject relies on reproducing this bit for bit.
    return np.sqrt(xyz[:, 0] * xyz[:, 0] + xyz[:, 1] * xyz[:, 1] + xyz[:, 2] * xyz[:, 2])


def _pixel_indices(xyz: np.ndarray, r: np.ndarray, cfg: ProjectionConfig):
    phi = np.arctan2(xyz[:, 1], xyz[:, 0])
    phi = np.where(phi <= -np.pi, np.pi, phi)
    cols = np.floor(0.5 * (1.0 - phi / np.pi) * cfg.width)
    theta = np.arcsin(np.clip(xyz[:, 2] / r, -1.0, 1.0))
    rows = np.floor((1.0 - (theta - cfg.fov_down_rad) / cfg.fov_rad) * cfg.height)
    rows = np.clip(rows, 0, cfg.height - 1).astype(np.int64)
    cols = np.clip(cols, 0, cfg.width - 1).astype(np.int64)
    return rows, cols


def pixel_of(p: Point, cfg: ProjectionConfig) -> tuple[int, int]:
    """Return the (row, col) pixel a point falls into."""
    xyz = np.array([[p.x, p.y, p.z]], dtype=np.float64)
    if not np.all(np.isfinite(xyz)):
        raise DomainError(f"non-finite point {p}")
    r = _norm(xyz)
    if not r[0] > 0:
        raise DomainError("point at the sensor origin has no direction")
    rows, cols = _pixel_indices(xyz, r, cfg)
    return int(rows[0]), int(cols[0])


def project(cloud: PointCloud, cfg: ProjectionConfig, report: ProjectionReport | None = None) -> RangeImage:
    """Bin a cloud into a range image; the nearest return wins each pixel.

    Points that are non-finite or sit at the origin are skipped and counted
    in ``report`` when one is supplied. Ties on range go to the earlier point.
    """
    xyz = np.asarray(cloud.xyz, dtype=np.float64)
    inten = np.asarray(cloud.intensity, dtype=np.float64)
    H, W = cfg.shape
    out_range = np.full(H * W, INVALID_RANGE)
    out_valid = np.zeros(H * W, dtype=bool)
    out_inten = np.zeros(H * W)

    r = _norm(xyz) if len(xyz) else np.zeros(0)
    ok = np.isfinite(r) & (r > 0) & np.isfinite(inten)
    idx = np.flatnonzero(ok)
    if report is not None:
        report.skipped += int(len(xyz) - len(idx))
        report.skipped_indices.extend(np.flatnonzero(~ok).tolist())
    if len(idx):
        rows, cols = _pixel_indices(xyz[idx], r[idx], cfg)
        flat = rows * W + cols
        # sort by pixel, then range, then original index; first of each run wins
        order = np.lexsort((idx, r[idx], flat))
        flat_sorted = flat[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = flat_sorted[1:] != flat_sorted[:-1]
        win = order[first]
        pix = flat[win]
        out_range[pix] = r[idx][win]
        out_valid[pix] = True
        out_inten[pix] = inten[idx][win]
        if report is not None:
            report.projected += int(len(idx))
            report.collisions += int(len(idx) - len(win))
    return RangeImage(cfg, out_range.reshape(H, W), out_valid.reshape(H, W), out_inten.reshape(H, W))


def pixel_directions(cfg: ProjectionConfig) -> np.ndarray:
    """(H, W, 3) unit vectors through every pixel center."""
    theta = cfg.row_elevations()[:, None]
    phi = cfg.col_azimuths()[None, :]
    ct = np.cos(theta)
    return np.stack(np.broadcast_arrays(ct * np.cos(phi), ct * np.sin(phi), np.sin(theta)), axis=-1)


def _two_square(a: np.ndarray):
    """Dekker's exact product: a*a == hi + lo."""
    t = 134217729.0 * a
    ah = t - (t - a)
    al = a - ah
    hi = a * a
    lo = ((ah * ah - hi) + 2.0 * ah * al) + al * al
    return hi, lo


def _walk_component(p: np.ndarray, bad: np.ndarray, r: np.ndarray, rank: int, steps: int) -> np.ndarray:
    """Re-solve the rank-th largest component of each bad point from the other
    two, then walk outward over neighbouring floats until ``_norm`` hits r.
    Returns the indices still unmatched."""
    comp = np.argsort(-np.abs(p[bad]), axis=1)[:, rank]
    # exact r^2 minus the other two squares as _norm rounds them, so the
    # solved component lands near the middle of its admissible interval
    hi, lo = _two_square(r[bad])
    for other in (1, 2):
        c = p[bad, (comp + other) % 3]
        hi = hi - c * c
    solved = np.copysign(np.sqrt(np.maximum(hi + lo, 0.0)), p[bad, comp])
    idx, k = bad, comp
    up, down = solved, solved
    cands = [solved]
    for _ in range(steps):
        for j in range(len(cands)):
            if not len(idx):
                break
            trial = p[idx]
            trial[np.arange(len(idx)), k] = cands[j]
            hit = _norm(trial) == r[idx]
            p[idx[hit]] = trial[hit]
            keep = ~hit
            idx, k, up, down = idx[keep], k[keep], up[keep], down[keep]
            cands = [c[keep] for c in cands]
        if not len(idx):
            break
        up = np.nextafter(up, np.inf)
        down = np.nextafter(down, -np.inf)
        cands = [up, down]
    return idx


def _points_at_range(dirs: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Scale unit directions so that ``_norm`` reproduces ``r`` exactly."""
    p = dirs * r[:, None]
    n = _norm(p)
    bad = np.flatnonzero(n != r)
    p[bad] *= (r[bad] / n[bad])[:, None]
    bad = bad[_norm(p[bad]) != r[bad]]
    for attempt in range(12):
        walk = 8 if attempt < 4 else 400
        for rank, steps in ((1, walk), (2, walk), (0, 4)):
            if len(bad):
                bad = _walk_component(p, bad, r, rank, steps)
        if not len(bad):
            break
        # a rounding tie in the partial sums can hide the target; shift the
        # two smaller components by a few dozen ulps and search again
        eps = np.finfo(float).eps
        order = np.argsort(np.abs(p[bad]), axis=1)
        p[bad, order[:, 0]] *= 1.0 + 37 * (attempt + 1) * eps
        p[bad, order[:, 1]] *= 1.0 - 11 * (attempt + 1) * eps
    if len(bad):
        logger.debug("%d points could not be placed at their exact range", len(bad))
    return p


def unproject(img: RangeImage, stamp: int = 0, frame_id: str = "lidar") -> PointCloud:
    """One point per valid pixel, placed along the pixel-center direction.

    Points come out in row-major pixel order.
    """
    dirs = pixel_directions(img.config)[img.valid]
    r = img.range[img.valid]
    xyz = _points_at_range(dirs, r) if len(r) else np.zeros((0, 3))
    inten = img.intensity[img.valid] if img.intensity is not None else np.zeros(len(r))
    return PointCloud(xyz, inten, stamp=stamp, frame_id=frame_id)
