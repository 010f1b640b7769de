"""Geometric ground/obstacle segmentation on range images.

Ground is found per column by walking upward from the lowest return while
the inclination between consecutive returns stays shallow. Obstacles are
grouped into instances with the beta-angle criterion between neighbouring
pixels. Any other segmenter mapping RangeImage -> LabelImage can be
registered in place of the geometric one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import ConfigError, ShapeError
from .rangeview import PointCloud, ProjectionConfig, RangeImage, pixel_directions, unproject

UNLABELED = 0
GROUND = 1
OBSTACLE = 2

# SemanticKITTI ids used on export: other-ground and other-object.
KITTI_IDS = {UNLABELED: 0, GROUND: 49, OBSTACLE: 99}


@dataclass
class ClassMap:
    names: dict[int, str] = field(default_factory=lambda: {UNLABELED: "unlabeled", GROUND: "ground", OBSTACLE: "obstacle"})

    def __post_init__(self):
        if self.names.get(UNLABELED) != "unlabeled":
            raise ConfigError("id 0 is reserved for 'unlabeled'")
        if len(set(self.names.values())) != len(self.names):
            raise ConfigError("class names must be unique")

    def add(self, name: str) -> int:
        """Claim the next free id for a new class."""
        if name in self.names.values():
            raise ConfigError(f"class {name!r} already exists")
        new_id = max(self.names) + 1
        self.names[new_id] = name
        return new_id

    def id_of(self, name: str) -> int:
        for k, v in self.names.items():
            if v == name:
                return k
        raise KeyError(name)


@dataclass(frozen=True)
class LabelImage:
    config: ProjectionConfig
    labels: np.ndarray
    instance: np.ndarray | None = None

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.uint16)
        if labels.shape != self.config.shape:
            raise ShapeError(f"label grid {labels.shape} does not match {self.config.shape}")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        if self.instance is not None:
            inst = np.array(self.instance, dtype=np.uint16)
            if inst.shape != labels.shape:
                raise ShapeError("instance grid must match label grid")
            inst.setflags(write=False)
            object.__setattr__(self, "instance", inst)

    @property
    def n_instances(self) -> int:
        return 0 if self.instance is None else int(self.instance.max(initial=0))


@dataclass(frozen=True)
class SegmenterConfig:
    ground_angle_max: float = 10.0
    cluster_angle_min: float = 10.0
    min_cluster_size: int = 8

    def __post_init__(self):
        if not 0 < self.ground_angle_max < 90:
            raise ConfigError("ground_angle_max must lie in (0, 90) degrees")
        if not 0 < self.cluster_angle_min < 90:
            raise ConfigError("cluster_angle_min must lie in (0, 90) degrees")
        if int(self.min_cluster_size) != self.min_cluster_size or self.min_cluster_size < 1:
            raise ConfigError("min_cluster_size must be a positive integer")


def _xyz_grid(img: RangeImage) -> np.ndarray:
    return pixel_directions(img.config) * np.where(img.valid, img.range, 0.0)[..., None]


def ground_segment(img: RangeImage, cfg: SegmenterConfig | None = None) -> LabelImage:
    """Label ground by walking each column upward from the bottom row."""
    cfg = cfg or SegmenterConfig()
    H, W = img.shape
    xyz = _xyz_grid(img)
    thr = math.radians(cfg.ground_angle_max)
    ground = np.zeros((H, W), dtype=bool)
    prev = np.zeros((W, 3))
    seen = np.zeros(W, dtype=int)  # valid returns met so far in the column
    first_row = np.full(W, -1)
    alive = np.ones(W, dtype=bool)
    cols = np.arange(W)
    for row in range(H - 1, -1, -1):
        v = img.valid[row]
        cur = xyz[row]
        d = cur - prev
        angle = np.arctan2(np.abs(d[:, 2]), np.hypot(d[:, 0], d[:, 1]))
        ok = v & (seen > 0) & alive & (angle <= thr)
        ground[row] = ok
        # the lowest return has no predecessor; it shares the verdict of the first step
        second = v & (seen == 1)
        ground[first_row[second], cols[second]] = ok[second]
        alive &= ~(v & (seen > 0)) | ok
        first_row = np.where(v & (seen == 0), row, first_row)
        prev = np.where(v[:, None], cur, prev)
        seen = seen + v
    labels = np.where(img.valid, np.where(ground, GROUND, OBSTACLE), UNLABELED)
    return LabelImage(img.config, labels)


def _beta_edges(r1: np.ndarray, r2: np.ndarray, alpha: float) -> np.ndarray:
    d1 = np.maximum(r1, r2)
    d2 = np.minimum(r1, r2)
    return np.arctan2(d2 * math.sin(alpha), d1 - d2 * math.cos(alpha))


def cluster_obstacles(img: RangeImage, labels: LabelImage, cfg: SegmenterConfig | None = None) -> LabelImage:
    """Group obstacle pixels into instances with the beta-angle criterion.

    Neighbours (4-connected, wrapping in azimuth) join when the angle their
    two returns make with the laser ray exceeds ``cluster_angle_min``.
    Clusters smaller than ``min_cluster_size`` keep their class but get no
    instance id. Instance ids are 1..n in row-major order of first pixel.
    """
    cfg = cfg or SegmenterConfig()
    if labels.labels.shape != img.shape:
        raise ShapeError("labels and image differ in size")
    H, W = img.shape
    obs = (labels.labels == OBSTACLE) & img.valid
    thr = math.radians(cfg.cluster_angle_min)
    idx = np.arange(H * W).reshape(H, W)
    r = img.range

    a_v = img.config.fov_rad / H
    m_v = obs[:-1] & obs[1:] & (_beta_edges(r[:-1], r[1:], a_v) > thr)
    a_h = 2 * math.pi / W
    r_next = np.roll(r, -1, axis=1)
    obs_next = np.roll(obs, -1, axis=1)
    m_h = obs & obs_next & (_beta_edges(r, r_next, a_h) > thr)
    if W == 1:
        m_h[:] = False
    src = np.concatenate([idx[:-1][m_v], idx[m_h]])
    dst = np.concatenate([idx[1:][m_v], np.roll(idx, -1, axis=1)[m_h]])
    graph = coo_matrix((np.ones(len(src)), (src, dst)), shape=(H * W, H * W))
    _, comp = connected_components(graph, directed=False)

    flat_obs = obs.ravel()
    comp_obs = comp[flat_obs]
    instance = np.zeros(H * W, dtype=np.int64)
    if len(comp_obs):
        uniq, first, counts = np.unique(comp_obs, return_index=True, return_counts=True)
        keep = counts >= cfg.min_cluster_size
        order = np.argsort(first[keep])
        new_id = np.zeros(len(uniq), dtype=np.int64)
        new_id[np.flatnonzero(keep)[order]] = np.arange(1, keep.sum() + 1)
        pos = np.searchsorted(uniq, comp_obs)
        instance[flat_obs] = new_id[pos]
    return LabelImage(img.config, labels.labels, instance.reshape(H, W))


def labels_to_cloud(img: RangeImage, labels: LabelImage, stamp: int = 0, frame_id: str = "lidar") -> PointCloud:
    """Back-project valid pixels with their class and instance ids attached."""
    if labels.labels.shape != img.shape:
        raise ShapeError("labels and image differ in size")
    cloud = unproject(img, stamp=stamp, frame_id=frame_id)
    inst = labels.instance[img.valid] if labels.instance is not None else np.zeros(len(cloud), dtype=np.uint16)
    return PointCloud(cloud.xyz, cloud.intensity, stamp, frame_id, labels=labels.labels[img.valid], instances=inst)


class Segmenter(Protocol):
    def __call__(self, img: RangeImage) -> LabelImage: ...


@dataclass
class GeometricSegmenter:
    config: SegmenterConfig = field(default_factory=SegmenterConfig)

    def __call__(self, img: RangeImage) -> LabelImage:
        return cluster_obstacles(img, ground_segment(img, self.config), self.config)


_SEGMENTERS: dict[str, Callable[[SegmenterConfig], Segmenter]] = {"geometric": GeometricSegmenter}


def register_segmenter(name: str, factory: Callable[[SegmenterConfig], Segmenter]) -> None:
    _SEGMENTERS[name] = factory


def make_segmenter(name: str = "geometric", cfg: SegmenterConfig | None = None) -> Segmenter:
    try:
        factory = _SEGMENTERS[name]
    except KeyError:
        raise ConfigError(f"unknown segmenter {name!r}") from None
    return factory(cfg or SegmenterConfig())


def to_kitti_ids(labels: np.ndarray) -> np.ndarray:
    out = np.zeros_like(labels)
    for ours, kitti in KITTI_IDS.items():
        out[labels == ours] = kitti
    return out


def from_kitti_ids(labels: np.ndarray) -> np.ndarray:
    out = np.zeros_like(labels)
    for ours, kitti in KITTI_IDS.items():
        out[labels == kitti] = ours
    return out
