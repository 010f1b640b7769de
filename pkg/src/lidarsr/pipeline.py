"""Staged in-process pipeline: source -> sr -> segment -> sinks.

Every stage is a thread; stages talk only through bounded ``Channel``s of
immutable ``StampedMessage``s. A channel either blocks the producer when
full or evicts its oldest message to admit the new one.
"""

from __future__ import annotations

import collections
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np

from .errors import ConfigError, PipelineError
from .evaluation import SceneSpec, generate_low_res_scan, random_scene
from .io import ScanRecord, read_scan_dir, write_kitti_bin, write_labels
from .rangeview import HIGH_RES, LOW_RES, PointCloud, ProjectionConfig, RangeImage, project
from .sampling import RowSelection, uniform_selection
from .segment import LabelImage, SegmenterConfig, labels_to_cloud, make_segmenter
from .solver import SolverConfig, superresolve

logger = logging.getLogger(__name__)

DROP_POLICIES = ("block", "drop-oldest")


@dataclass(frozen=True)
class StampedMessage:
    seq: int
    stamp: int
    payload: Any

    @property
    def type(self) -> str:
        p = self.payload
        if isinstance(p, PointCloud):
            return "labeled_cloud" if p.labels is not None else "point_cloud"
        if isinstance(p, RangeImage):
            return "range_image"
        if isinstance(p, LabelImage):
            return "label_image"
        return type(p).__name__


class Channel:
    """Bounded FIFO with exact produced/delivered/dropped accounting."""

    def __init__(self, name: str, capacity: int, policy: str):
        if capacity < 1:
            raise ConfigError("queue capacity must be at least 1")
        if policy not in DROP_POLICIES:
            raise ConfigError(f"drop policy must be one of {DROP_POLICIES}")
        self.name = name
        self.capacity = capacity
        self.policy = policy
        self._items: collections.deque = collections.deque()
        self._cond = threading.Condition()
        self._closed = False
        self._aborted = False
        self.produced = 0
        self.delivered = 0
        self.dropped = 0
        self.peak = 0
        self.last_seq = -1
        self.seq_violations = 0

    def put(self, msg) -> bool:
        """Enqueue; returns False once the channel has been aborted."""
        with self._cond:
            if self.policy == "block":
                while len(self._items) >= self.capacity and not self._aborted:
                    self._cond.wait()
            if self._aborted:
                return False
            self.produced += 1
            if len(self._items) >= self.capacity:
                self._items.popleft()
                self.dropped += 1
            self._items.append(msg)
            self.peak = max(self.peak, len(self._items))
            self._cond.notify_all()
            return True

    def get(self):
        """Next message, or None when closed and drained (or aborted)."""
        with self._cond:
            while not self._items and not self._closed and not self._aborted:
                self._cond.wait()
            if self._aborted or not self._items:
                return None
            msg = self._items.popleft()
            self.delivered += 1
            seq = getattr(msg, "seq", None)
            if seq is not None:
                if seq <= self.last_seq:
                    self.seq_violations += 1
                self.last_seq = seq
            self._cond.notify_all()
            return msg

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def abort(self):
        """Stop everything; messages still queued are counted as dropped."""
        with self._cond:
            self._aborted = True
            self.dropped += len(self._items)
            self._items.clear()
            self._cond.notify_all()

    def __len__(self):
        with self._cond:
            return len(self._items)

    def stats(self) -> dict:
        with self._cond:
            return {
                "produced": self.produced,
                "delivered": self.delivered,
                "dropped": self.dropped,
                "peak_queued": self.peak,
                "capacity": self.capacity,
                "policy": self.policy,
                "seq_violations": self.seq_violations,
            }


class Sink:
    """Receives delivered messages in sequence order."""

    name = "sink"

    def start(self):
        pass

    def handle(self, msg: StampedMessage):
        raise NotImplementedError

    def stop(self):
        pass


class CollectSink(Sink):
    name = "collect"

    def __init__(self, keep_payload: bool = True):
        self.messages: list[StampedMessage] = []
        self.seqs: list[int] = []
        self.keep_payload = keep_payload

    def handle(self, msg):
        self.seqs.append(msg.seq)
        if self.keep_payload:
            self.messages.append(msg)


class FileSink(Sink):
    """Writes each labeled cloud as ``<seq>.bin`` plus ``<seq>.label``."""

    name = "files"

    def __init__(self, directory):
        self.directory = Path(directory)

    def start(self):
        self.directory.mkdir(parents=True, exist_ok=True)

    def handle(self, msg):
        cloud = msg.payload
        stem = self.directory / f"{msg.seq:06d}"
        write_kitti_bin(cloud, stem.with_suffix(".bin"))
        if cloud.labels is not None:
            write_labels(cloud.labels, stem.with_suffix(".label"), cloud.instances)


class CallbackSink(Sink):
    def __init__(self, fn: Callable[[StampedMessage], None], name: str = "callback"):
        self.fn = fn
        self.name = name

    def handle(self, msg):
        self.fn(msg)


@dataclass
class NodeGraph:
    sinks: list = field(default_factory=list)
    queue_capacity: int = 2
    drop_policy: str = "block"

    def __post_init__(self):
        if self.queue_capacity < 1:
            raise ConfigError("queue_capacity must be at least 1")
        if self.drop_policy not in DROP_POLICIES:
            raise ConfigError(f"drop_policy must be one of {DROP_POLICIES}")
        names = [s.name for s in self.sinks]
        if len(set(names)) != len(names):
            # sink names key the report; make them unique
            for i, s in enumerate(self.sinks):
                s.name = f"{s.name}{i}"


class SyntheticSource:
    """Endless-free generator of 16-beam scans from random scenes."""

    def __init__(self, n_scans: int, seed: int = 0, sel: RowSelection | None = None,
                 high_cfg: ProjectionConfig = HIGH_RES, spec: SceneSpec | None = None, period_ns: int = 100_000_000):
        self.n_scans = n_scans
        self.seed = seed
        self.high_cfg = high_cfg
        self.sel = sel or uniform_selection(high_cfg.height, LOW_RES.height)
        self.spec = spec
        self.period_ns = period_ns

    def __iter__(self):
        for i in range(self.n_scans):
            if self.spec is None:
                spec = random_scene(self.seed + i)
            else:
                spec = SceneSpec(self.spec.ground_height, self.spec.boxes, self.spec.walls,
                                 self.spec.noise_sigma, self.spec.seed + i, self.spec.max_range)
            yield generate_low_res_scan(spec, self.sel, self.high_cfg, stamp=i * self.period_ns)


def _percentiles(samples: list[float]) -> dict:
    if not samples:
        return {"count": 0}
    a = np.asarray(samples)
    return {
        "count": len(a),
        "mean_s": float(a.mean()),
        "p50_s": float(np.percentile(a, 50)),
        "p95_s": float(np.percentile(a, 95)),
        "p99_s": float(np.percentile(a, 99)),
        "max_s": float(a.max()),
    }


def _as_cloud(item) -> PointCloud:
    if isinstance(item, ScanRecord):
        return item.cloud
    if isinstance(item, PointCloud):
        return item
    raise PipelineError(f"source produced {type(item).__name__}, expected a point cloud")


def default_stages(sel: RowSelection, solver_cfg: SolverConfig, seg_cfg: SegmenterConfig,
                   low_cfg: ProjectionConfig = LOW_RES, segmenter: str = "geometric"):
    """The (sr, segment) stage functions: cloud -> T_hat -> labeled cloud."""
    seg = make_segmenter(segmenter, seg_cfg)

    def sr(cloud: PointCloud) -> RangeImage:
        S = project(cloud, low_cfg)
        T_hat, _ = superresolve(S, sel, solver_cfg)
        return T_hat

    def segment(T_hat: RangeImage, stamp: int, frame_id: str) -> PointCloud:
        return labels_to_cloud(T_hat, seg(T_hat), stamp=stamp, frame_id=frame_id)

    return sr, segment


def run_pipeline(
    source: Iterable | str | Path,
    graph: NodeGraph | None = None,
    solver_cfg: SolverConfig | None = None,
    seg_cfg: SegmenterConfig | None = None,
    rate: float | None = None,
    sel: RowSelection | None = None,
    low_cfg: ProjectionConfig = LOW_RES,
    high_cfg: ProjectionConfig = HIGH_RES,
    stages: dict | None = None,
) -> dict:
    """Push every scan through project -> superresolve -> segment -> sinks.

    ``rate`` paces the source in Hz (None runs flat out). ``stages`` may
    override ``"sr"`` (cloud -> RangeImage) and ``"segment"``
    ((RangeImage, stamp, frame_id) -> labeled PointCloud). Returns the run
    report as a JSON-serializable dict; a failing stage shuts the run down
    and is named in ``report["error"]``.
    """
    graph = graph or NodeGraph()
    if rate is not None and not rate > 0:
        raise ConfigError("rate must be positive (or None for max speed)")
    if isinstance(source, (str, Path)):
        source = read_scan_dir(source)
    sel = sel or uniform_selection(high_cfg.height, low_cfg.height)
    sr_fn, seg_fn = default_stages(sel, solver_cfg or SolverConfig(), seg_cfg or SegmenterConfig(), low_cfg)
    if stages:
        sr_fn = stages.get("sr", sr_fn)
        seg_fn = stages.get("segment", seg_fn)

    cap, pol = graph.queue_capacity, graph.drop_policy
    q_sr = Channel("source->sr", cap, pol)
    q_seg = Channel("sr->segment", cap, pol)
    q_sinks = [Channel(f"segment->{s.name}", cap, pol) for s in graph.sinks]
    channels = [q_sr, q_seg, *q_sinks]

    lat = {"source": [], "sr": [], "segment": [], "end_to_end": []}
    for s in graph.sinks:
        lat[f"sink:{s.name}"] = []
    publish_time: dict[int, float] = {}
    lock = threading.Lock()
    errors: list[str] = []
    produced = [0]
    completed = [0]
    abort = threading.Event()

    def fail(stage: str, exc: BaseException):
        logger.error("stage %s failed: %r", stage, exc)
        with lock:
            errors.append(f"{stage}: {type(exc).__name__}: {exc}")
        abort.set()
        for ch in channels:
            ch.abort()

    def source_worker():
        try:
            t_next = time.perf_counter()
            it = iter(source)
            seq = 0
            while not abort.is_set():
                t0 = time.perf_counter()
                try:
                    item = next(it)
                except StopIteration:
                    break
                cloud = _as_cloud(item)
                lat["source"].append(time.perf_counter() - t0)
                if rate is not None:
                    t_next += 1.0 / rate
                    delay = t_next - time.perf_counter()
                    if delay > 0:
                        time.sleep(delay)
                with lock:
                    publish_time[seq] = time.perf_counter()
                if not q_sr.put(StampedMessage(seq, cloud.stamp, cloud)):
                    break
                produced[0] += 1
                seq += 1
        except Exception as e:
            fail("source", e)
        finally:
            q_sr.close()

    def sr_worker():
        try:
            while (msg := q_sr.get()) is not None:
                t0 = time.perf_counter()
                out = sr_fn(msg.payload)
                lat["sr"].append(time.perf_counter() - t0)
                if not q_seg.put(StampedMessage(msg.seq, msg.stamp, out)):
                    break
        except Exception as e:
            fail("sr", e)
        finally:
            q_seg.close()

    def seg_worker():
        try:
            while (msg := q_seg.get()) is not None:
                t0 = time.perf_counter()
                out = seg_fn(msg.payload, msg.stamp, "lidar")
                lat["segment"].append(time.perf_counter() - t0)
                completed[0] += 1
                out_msg = StampedMessage(msg.seq, msg.stamp, out)
                for ch in q_sinks:
                    ch.put(out_msg)
        except Exception as e:
            fail("segment", e)
        finally:
            for ch in q_sinks:
                ch.close()

    def sink_worker(sink: Sink, ch: Channel):
        try:
            while (msg := ch.get()) is not None:
                t0 = time.perf_counter()
                sink.handle(msg)
                t1 = time.perf_counter()
                lat[f"sink:{sink.name}"].append(t1 - t0)
                with lock:
                    t_pub = publish_time.get(msg.seq)
                if t_pub is not None:
                    lat["end_to_end"].append(t1 - t_pub)
        except Exception as e:
            fail(f"sink:{sink.name}", e)

    for s in graph.sinks:
        s.start()
    threads = [
        threading.Thread(target=source_worker, name="source", daemon=True),
        threading.Thread(target=sr_worker, name="sr", daemon=True),
        threading.Thread(target=seg_worker, name="segment", daemon=True),
    ] + [threading.Thread(target=sink_worker, args=(s, ch), name=f"sink:{s.name}", daemon=True) for s, ch in zip(graph.sinks, q_sinks)]
    t_start = time.perf_counter()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    wall = time.perf_counter() - t_start
    for s in graph.sinks:
        try:
            s.stop()
        except Exception as e:  # a sink failing on shutdown must not hide the report
            errors.append(f"sink:{s.name} stop: {e}")

    return {
        "status": "failed" if errors else "ok",
        "error": "; ".join(errors) if errors else None,
        "produced": produced[0],
        "completed": completed[0],
        "wall_time_s": wall,
        "fps": completed[0] / wall if wall > 0 and completed[0] else 0.0,
        "drop_policy": pol,
        "queue_capacity": cap,
        "edges": {ch.name: ch.stats() for ch in channels},
        "latency": {k: _percentiles(v) for k, v in lat.items()},
    }


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True))
