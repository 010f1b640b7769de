"""``lidarsr`` command line.

Exit codes: 0 success, 1 usage, 2 I/O, 3 numeric/config validation,
4 pipeline run failed. Errors are printed to stderr as one JSON line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as lio
from .config import RunConfig
from .errors import ConfigError, FormatError, LidarSRError, PipelineError
from .evaluation import MetricReport, SceneSpec, bench_throughput, iou, mae, residual_norm, rmse
from .pipeline import FileSink, SyntheticSource, run_pipeline, write_report
from .rangeview import RangeImage, project, unproject
from .sampling import apply
from .segment import LabelImage, from_kitti_ids, labels_to_cloud, make_segmenter, to_kitti_ids
from .solver import superresolve

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VALIDATION, EXIT_RUN = 0, 1, 2, 3, 4

log = logging.getLogger("lidarsr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


_D = RunConfig()

# flag -> (section, key, help). Flags default to None so only explicit ones override the config file.
OVERRIDES = {
    "width": ("projection", "width", "range image width (columns)"),
    "fov_up": ("projection", "fov_up", "upper field-of-view bound, degrees"),
    "fov_down": ("projection", "fov_down", "lower field-of-view bound, degrees"),
    "low_height": ("projection", "low_height", "rows of the low-resolution scan"),
    "high_height": ("projection", "high_height", "rows of the super-resolved image"),
    "offset": ("sampling", "offset", "first selected high-res row"),
    "b": ("solver", "b", "penalty weight of the data step"),
    "iters": ("solver", "iterations", "number of unrolled layers"),
    "prior": ("solver", "prior", "denoiser: identity, median or tv-prox"),
    "prior_strength": ("solver", "prior_strength", "denoiser strength (TV weight, median blend)"),
    "tv_iters": ("solver", "tv_inner_iters", "Chambolle iterations per TV prox"),
    "median_window": ("solver", "median_window", "median window size (odd)"),
    "init": ("solver", "init", "initialization: replicate-rows or adjoint-zero-fill"),
    "ground_angle": ("segmenter", "ground_angle_max", "max ground inclination, degrees"),
    "cluster_angle": ("segmenter", "cluster_angle_min", "min beta angle to join neighbours, degrees"),
    "min_cluster": ("segmenter", "min_cluster_size", "smallest cluster given an instance id"),
    "queue_capacity": ("graph", "queue_capacity", "bounded queue length per edge"),
    "drop_policy": ("graph", "drop_policy", "block or drop-oldest"),
}
_TYPES = {int: int, float: float, str: str}

GROUPS = {
    "projection": ["width", "fov_up", "fov_down", "low_height", "high_height"],
    "sampling": ["offset"],
    "solver": ["b", "iters", "prior", "prior_strength", "tv_iters", "median_window", "init"],
    "segmenter": ["ground_angle", "cluster_angle", "min_cluster"],
    "graph": ["queue_capacity", "drop_policy"],
}


def _add_overrides(p: argparse.ArgumentParser, *groups: str):
    for g in groups:
        grp = p.add_argument_group(f"{g} options")
        for dest in GROUPS[g]:
            section, key, text = OVERRIDES[dest]
            default = getattr(getattr(_D, section), key)
            flag = "--" + dest.replace("_", "-")
            grp.add_argument(flag, dest=dest, type=type(default), default=None, metavar=type(default).__name__.upper(),
                             help=f"{text} (default: {default})")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lidarsr", description="LiDAR range-image super-resolution and segmentation toolkit.")
    p.add_argument("--config", help="YAML run configuration (default: none, built-in defaults)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging (default: off)")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    c = sub.add_parser("project", help="bin scan -> range image PNG or projected PCD")
    c.add_argument("input", help="KITTI .bin scan")
    c.add_argument("output", help="output .png (range image) or .pcd (pixel-center cloud)")
    c.add_argument("--resolution", choices=("low", "high"), default="low", help="which grid to project onto (default: low)")
    _add_overrides(c, "projection")

    c = sub.add_parser("downsample", help="high-res range image -> low-res by row selection")
    c.add_argument("input", help="high-res .png, or .bin scan projected onto the high-res grid")
    c.add_argument("output", help="low-res .png")
    _add_overrides(c, "projection", "sampling")

    c = sub.add_parser("sr", help="low-res range image -> super-resolved high-res image")
    c.add_argument("input", help="low-res .png")
    c.add_argument("output", help="high-res .png")
    c.add_argument("--diagnostics", help="write residual history JSON here (default: none)")
    _add_overrides(c, "projection", "sampling", "solver")

    c = sub.add_parser("segment", help="range image -> per-point labels")
    c.add_argument("input", help="range image .png")
    c.add_argument("output", help="SemanticKITTI .label file, points in row-major pixel order")
    c.add_argument("--cloud", help="also write the matching .bin cloud (default: none)")
    c.add_argument("--kitti-ids", action="store_true", help="export SemanticKITTI class ids (default: off)")
    _add_overrides(c, "projection", "segmenter")

    c = sub.add_parser("eval", help="compare a prediction with ground truth")
    c.add_argument("pred", help="predicted range image .png")
    c.add_argument("gt", help="ground-truth range image .png")
    c.add_argument("report", help="output report .json")
    c.add_argument("--scope", choices=("all", "unobserved-rows"), default="all", help="pixels scored (default: all)")
    c.add_argument("--observed", help="low-res .png used for the residual (default: none)")
    c.add_argument("--pred-labels", help=".label file for pred's valid pixels (default: none)")
    c.add_argument("--gt-labels", help=".label file for gt's valid pixels (default: none)")
    _add_overrides(c, "projection", "sampling")

    c = sub.add_parser("run", help="run the full staged pipeline")
    c.add_argument("scan_dir", nargs="?", help="directory of .bin scans")
    c.add_argument("--synthetic", nargs="?", const="random", default=None,
                   help="use generated scans; optional YAML/JSON scene spec (default: off)")
    c.add_argument("--scans", type=int, default=10, help="number of synthetic scans (default: 10)")
    c.add_argument("--seed", type=int, default=0, help="synthetic scene seed (default: 0)")
    c.add_argument("--rate", type=float, default=None, help="source rate in Hz (default: max speed)")
    c.add_argument("--serve-port", type=int, default=None, help="serve the JSON line stream on this port (default: off)")
    c.add_argument("--out-dir", help="write labeled clouds here (default: none)")
    c.add_argument("--report", default="run_report.json", help="run report path (default: run_report.json)")
    _add_overrides(c, "projection", "sampling", "solver", "segmenter", "graph")

    c = sub.add_parser("bench", help="throughput of the full chain on generated scans")
    c.add_argument("--scans", type=int, default=20, help="number of scans (default: 20)")
    c.add_argument("--seed", type=int, default=0, help="scene seed (default: 0)")
    c.add_argument("--report", help="write the statistics JSON here (default: stdout only)")
    _add_overrides(c, "projection", "sampling", "solver", "segmenter")
    return p


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for dest, (section, key, _) in OVERRIDES.items():
        v = getattr(args, dest, None)
        if v is not None:
            cfg.update(section, {key: v})
    cfg.validate()
    return cfg


def _load_image(path, cfg):
    return lio.import_range_png(path, cfg)


def _labels_image(path, img: RangeImage) -> LabelImage:
    cls, inst = lio.read_labels(path)
    if len(cls) != img.occupancy:
        raise ConfigError(f"{path}: {len(cls)} labels for {img.occupancy} valid pixels")
    lab = np.zeros(img.shape, dtype=np.uint16)
    ins = np.zeros(img.shape, dtype=np.uint16)
    lab[img.valid] = cls
    ins[img.valid] = inst
    return LabelImage(img.config, lab, ins)


def cmd_project(args, cfg: RunConfig):
    grid = cfg.low_cfg() if args.resolution == "low" else cfg.high_cfg()
    img = project(lio.read_kitti_bin(args.input), grid)
    out = Path(args.output)
    if out.suffix == ".pcd":
        lio.write_pcd(unproject(img), out)
    else:
        lio.export_range_png(img, out)
    return {"occupied": img.occupancy}


def cmd_downsample(args, cfg: RunConfig):
    if Path(args.input).suffix == ".bin":
        T = project(lio.read_kitti_bin(args.input), cfg.high_cfg())
    else:
        T = _load_image(args.input, cfg.high_cfg())
    lio.export_range_png(apply(T, cfg.selection()), args.output)
    return {}


def cmd_sr(args, cfg: RunConfig):
    S = _load_image(args.input, cfg.low_cfg())
    T_hat, state = superresolve(S, cfg.selection(), cfg.solver_config())
    lio.export_range_png(T_hat, args.output)
    diag = {"iterations": state.k, "residual_history": state.residual_history}
    if args.diagnostics:
        Path(args.diagnostics).write_text(json.dumps(diag, indent=2))
    return diag


def cmd_segment(args, cfg: RunConfig):
    img = lio.import_range_png(args.input, None)
    grid = cfg.high_cfg() if img.shape[0] == cfg.projection.high_height else cfg.low_cfg()
    img = RangeImage(grid, img.range, img.valid)
    labels = make_segmenter("geometric", cfg.segmenter_config())(img)
    cloud = labels_to_cloud(img, labels)
    cls = to_kitti_ids(cloud.labels) if args.kitti_ids else cloud.labels
    lio.write_labels(cls, args.output, cloud.instances)
    if args.cloud:
        lio.write_kitti_bin(cloud, args.cloud)
    return {"points": len(cloud), "instances": labels.n_instances}


def cmd_eval(args, cfg: RunConfig):
    pred = lio.import_range_png(args.pred, None)
    gt = lio.import_range_png(args.gt, None)
    sel = cfg.selection() if args.scope == "unobserved-rows" or args.observed else None
    report = MetricReport(mae=mae(pred, gt, args.scope, sel), rmse=rmse(pred, gt, args.scope, sel))
    if args.observed:
        S = lio.import_range_png(args.observed, None)
        report.residual = residual_norm(S, pred, sel)
    if args.pred_labels and args.gt_labels:
        pl = _labels_image(args.pred_labels, pred)
        gl = _labels_image(args.gt_labels, gt)
        report.iou_per_class = iou(pl, gl)
    Path(args.report).write_text(report.to_json())
    return json.loads(report.to_json())


def _load_spec(path) -> SceneSpec:
    import yaml

    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as e:
        raise FormatError(f"cannot read scene spec {path}: {e}") from e
    except yaml.YAMLError as e:
        raise FormatError(f"scene spec {path} is not valid YAML/JSON: {e}") from e
    try:
        return SceneSpec.from_dict(data or {})
    except TypeError as e:
        raise ConfigError(f"bad scene spec: {e}") from e


def cmd_run(args, cfg: RunConfig):
    from .stream import serve_stream

    if (args.scan_dir is None) == (args.synthetic is None):
        raise UsageError("give either a scan directory or --synthetic")
    if args.scans < 0:
        raise ConfigError("--scans must be non-negative")
    sel = cfg.selection()
    if args.synthetic is not None:
        spec = None if args.synthetic == "random" else _load_spec(args.synthetic)
        source = SyntheticSource(args.scans, args.seed, sel, cfg.high_cfg(), spec)
    else:
        if not Path(args.scan_dir).is_dir():
            raise FormatError(f"{args.scan_dir} is not a directory")
        source = args.scan_dir
    sinks = []
    if args.out_dir:
        sinks.append(FileSink(args.out_dir))
    if args.serve_port is not None:
        sinks.append(serve_stream(args.serve_port, capacity=cfg.graph.queue_capacity, drop_policy=cfg.graph.drop_policy))
    report = run_pipeline(source, cfg.graph_config(sinks), cfg.solver_config(), cfg.segmenter_config(),
                          rate=args.rate, sel=sel, low_cfg=cfg.low_cfg(), high_cfg=cfg.high_cfg())
    write_report(report, args.report)
    if report["status"] != "ok":
        raise PipelineError(report["error"])
    return {"fps": report["fps"], "completed": report["completed"], "report": args.report}


def cmd_bench(args, cfg: RunConfig):
    stats = bench_throughput(args.scans, cfg.solver_config(), cfg.segmenter_config(), cfg.low_cfg(), cfg.high_cfg(), args.seed)
    if args.report:
        Path(args.report).write_text(json.dumps(stats, indent=2))
    return stats


COMMANDS = {
    "project": cmd_project,
    "downsample": cmd_downsample,
    "sr": cmd_sr,
    "segment": cmd_segment,
    "eval": cmd_eval,
    "run": cmd_run,
    "bench": cmd_bench,
}


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "message": str(message).splitlines()[0] if message else ""}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        cfg = _config(args)
        result = COMMANDS[args.command](args, cfg)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        return _fail(EXIT_USAGE, "usage", e)
    except PipelineError as e:
        return _fail(EXIT_RUN, "pipeline", e)
    except (FormatError, OSError) as e:
        return _fail(EXIT_IO, type(e).__name__, e)
    except LidarSRError as e:
        return _fail(EXIT_VALIDATION, type(e).__name__, e)
    if result:
        print(json.dumps(result))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
