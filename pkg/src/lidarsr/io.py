"""Readers and writers for KITTI scans, SemanticKITTI labels, PCD and
centimetre-quantized 16-bit PNG range images.

Every reader raises ``FormatError`` (or its ``UnsupportedFormatError``
subclass) on bad input, never a bare numpy/PIL exception.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, ShapeError, UnsupportedFormatError
from .rangeview import PointCloud, ProjectionConfig, RangeImage

PNG_SCALE = 100.0  # pixel units per meter
PNG_MAX_RANGE = 65535 / PNG_SCALE


@dataclass
class ScanRecord:
    cloud: PointCloud
    labels: np.ndarray | None = None
    source_path: str = ""

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.cloud):
            raise ShapeError("label count differs from point count")


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from e


def read_kitti_bin(path, stamp: int = 0, frame_id: str = "lidar") -> PointCloud:
    """Little-endian float32 (x, y, z, intensity) records, in file order."""
    raw = _read_bytes(path)
    if len(raw) % 16:
        raise FormatError(f"{path}: {len(raw)} bytes is not a whole number of 16-byte points")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return PointCloud(pts[:, :3].astype(np.float32), pts[:, 3].astype(np.float32), stamp=stamp, frame_id=frame_id)


def write_kitti_bin(cloud: PointCloud, path) -> None:
    arr = np.empty((len(cloud), 4), dtype="<f4")
    arr[:, :3] = cloud.xyz
    arr[:, 3] = cloud.intensity
    Path(path).write_bytes(arr.tobytes())


def read_labels(path) -> tuple[np.ndarray, np.ndarray]:
    """SemanticKITTI ``.label``: returns (class ids, instance ids) as uint16."""
    raw = _read_bytes(path)
    if len(raw) % 4:
        raise FormatError(f"{path}: {len(raw)} bytes is not a whole number of uint32 labels")
    v = np.frombuffer(raw, dtype="<u4")
    return (v & 0xFFFF).astype(np.uint16), (v >> 16).astype(np.uint16)


def write_labels(labels, path, instances=None) -> None:
    labels = np.asarray(labels, dtype=np.uint32)
    if np.any(labels > 0xFFFF):
        raise DomainError("class ids must fit in 16 bits")
    inst = np.zeros_like(labels) if instances is None else np.asarray(instances, dtype=np.uint32)
    if inst.shape != labels.shape:
        raise ShapeError("instance ids must match class ids")
    if np.any(inst > 0xFFFF):
        raise DomainError("instance ids must fit in 16 bits")
    Path(path).write_bytes(((inst << 16) | labels).astype("<u4").tobytes())


_PCD_FIELDS = ("x", "y", "z", "intensity")


def write_pcd(cloud: PointCloud, path, ascii: bool = False) -> None:
    n = len(cloud)
    header = (
        "# .PCD v0.7 - Point Cloud Data file format\n"
        "VERSION 0.7\n"
        "FIELDS x y z intensity\n"
        "SIZE 4 4 4 4\n"
        "TYPE F F F F\n"
        "COUNT 1 1 1 1\n"
        f"WIDTH {n}\n"
        "HEIGHT 1\n"
        "VIEWPOINT 0 0 0 1 0 0 0\n"
        f"POINTS {n}\n"
        f"DATA {'ascii' if ascii else 'binary'}\n"
    )
    arr = np.empty((n, 4), dtype="<f4")
    arr[:, :3] = cloud.xyz
    arr[:, 3] = cloud.intensity
    if ascii:
        body = "".join(" ".join(f"{v:.9g}" for v in row) + "\n" for row in arr.tolist())
        Path(path).write_text(header + body, encoding="ascii")
    else:
        Path(path).write_bytes(header.encode("ascii") + arr.tobytes())


def _parse_pcd_header(raw: bytes, path):
    header = {}
    pos = 0
    while True:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise FormatError(f"{path}: header ends before DATA line")
        try:
            line = raw[pos:end].decode("ascii").strip()
        except UnicodeDecodeError as e:
            raise FormatError(f"{path}: non-ascii header") from e
        pos = end + 1
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        header[key.upper()] = rest.split()
        if key.upper() == "DATA":
            return header, pos


def read_pcd(path, stamp: int = 0, frame_id: str = "lidar") -> PointCloud:
    """Read an ascii or binary PCD with float32 x y z [intensity] fields."""
    raw = _read_bytes(path)
    header, offset = _parse_pcd_header(raw, path)
    fields = tuple(header.get("FIELDS", ()))
    if fields not in (_PCD_FIELDS, _PCD_FIELDS[:3]):
        raise UnsupportedFormatError(f"{path}: unsupported fields {fields}")
    nf = len(fields)
    if tuple(header.get("SIZE", ())) != ("4",) * nf or tuple(header.get("TYPE", ())) != ("F",) * nf:
        raise UnsupportedFormatError(f"{path}: only 4-byte float fields are supported")
    if tuple(header.get("COUNT", ("1",) * nf)) != ("1",) * nf:
        raise UnsupportedFormatError(f"{path}: multi-count fields are not supported")
    try:
        n = int(header["POINTS"][0]) if "POINTS" in header else int(header["WIDTH"][0]) * int(header["HEIGHT"][0])
    except (KeyError, IndexError, ValueError) as e:
        raise FormatError(f"{path}: missing or bad point count") from e
    if n < 0:
        raise FormatError(f"{path}: negative point count")
    mode = header["DATA"][0].lower() if header["DATA"] else ""
    if mode == "binary":
        body = raw[offset:]
        if len(body) != n * 4 * nf:
            raise FormatError(f"{path}: expected {n * 4 * nf} data bytes, found {len(body)}")
        arr = np.frombuffer(body, dtype="<f4").reshape(n, nf)
    elif mode == "ascii":
        try:
            rows = [line.split() for line in raw[offset:].decode("ascii").splitlines() if line.strip()]
            arr = np.array(rows, dtype=np.float32).reshape(-1, nf) if rows else np.zeros((0, nf), np.float32)
        except (UnicodeDecodeError, ValueError) as e:
            raise FormatError(f"{path}: malformed ascii body") from e
        if arr.shape[0] != n or any(len(r) != nf for r in rows):
            raise FormatError(f"{path}: expected {n} rows of {nf} values")
    else:
        raise UnsupportedFormatError(f"{path}: unsupported DATA mode {mode!r}")
    inten = arr[:, 3] if nf == 4 else np.zeros(n, dtype=np.float32)
    return PointCloud(arr[:, :3].astype(np.float32), inten.astype(np.float32), stamp=stamp, frame_id=frame_id)


def export_range_png(img: RangeImage, path) -> None:
    """16-bit grayscale PNG, centimetres; 0 marks an invalid pixel."""
    from PIL import Image

    r = img.range[img.valid]
    if r.size and (r.max() >= PNG_MAX_RANGE + 0.5 / PNG_SCALE or r.min() < 0.5 / PNG_SCALE):
        raise DomainError(f"ranges must lie in [0.005, {PNG_MAX_RANGE}] m for PNG export")
    px = np.zeros(img.shape, dtype=np.uint16)
    px[img.valid] = np.rint(r * PNG_SCALE).astype(np.uint16)
    Image.fromarray(px).save(path, format="PNG")


def import_range_png(path, cfg: ProjectionConfig | None = None) -> RangeImage:
    """Inverse of ``export_range_png``. Without ``cfg`` the default FOV is
    assumed and height/width come from the file."""
    from PIL import Image

    try:
        with Image.open(path) as im:
            im.load()
            px = np.array(im)
    except FileNotFoundError as e:
        raise FormatError(f"cannot read {path}: {e}") from e
    except Exception as e:  # PIL raises a zoo of types on corrupt data
        raise FormatError(f"{path}: not a readable PNG ({e})") from e
    if px.ndim != 2 or not np.issubdtype(px.dtype, np.integer):
        raise UnsupportedFormatError(f"{path}: expected single-channel 16-bit image, got {px.dtype} {px.shape}")
    if cfg is None:
        cfg = ProjectionConfig(height=px.shape[0], width=px.shape[1])
    elif px.shape != cfg.shape:
        raise ShapeError(f"{path}: image is {px.shape}, config expects {cfg.shape}")
    px = px.astype(np.int64)
    if px.min(initial=0) < 0 or px.max(initial=0) > 65535:
        raise FormatError(f"{path}: pixel values outside the 16-bit range")
    valid = px > 0
    return RangeImage(cfg, np.where(valid, px / PNG_SCALE, -1.0), valid)


def _scan_index(name: str) -> tuple:
    m = re.search(r"(\d+)", name)
    return (int(m.group(1)) if m else -1, name)


def read_scan_dir(directory, period_ns: int = 100_000_000):
    """Yield ``ScanRecord`` for every ``*.bin`` in a directory, in numeric order.

    A sibling ``labels/<stem>.label`` or ``<stem>.label`` is attached when
    present. Stamps are synthesized at ``period_ns`` spacing.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError(f"{directory} is not a directory")
    files = sorted((p for p in directory.iterdir() if p.suffix == ".bin"), key=lambda p: _scan_index(p.name))
    for i, p in enumerate(files):
        cloud = read_kitti_bin(p, stamp=i * period_ns)
        labels = None
        for cand in (p.with_suffix(".label"), directory.parent / "labels" / (p.stem + ".label")):
            if cand.exists() and os.path.getsize(cand) == 4 * len(cloud):
                labels = read_labels(cand)[0]
                break
        yield ScanRecord(cloud, labels, str(p))
