"""``pointiid`` command line: decompose, train, eval, gen-synth, normals, perturb-depth.

Exit codes: 0 success, 1 internal error, 2 usage or input error.
Every subcommand writes only below its ``--out`` directory.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import data, metrics, model
from .geometry import average_downsample, build_point_cloud, estimate_normals, perturb_depth
from .pipeline import DEFAULT_METRICS, Downsample, evaluate, model_predictor, prepare_item, report_json, report_table

log = logging.getLogger("pointiid")

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "downsample": "voxel=0.03",
    "k": 16,
    "steps": 2000,
    "lr": 3e-4,
    "stage": "both",
    "loss_weights": [1.0, 1.0, 1.0],
    "accumulate": 1,
    "metrics": list(DEFAULT_METRICS),
    "rescale_reflectance": False,
    "delta": 0.10,
    "mode": "hole",
    "fraction": 0.1,
    "magnitude": 0.1,
    "count": 16,
    "size": 32,
    "primitive": "sphere",
    "depth_format": "pfm",
}
TRACE_COLUMNS = ["stage", "step", "L_shading", "L_rec", "L_grad", "L_ccr", "L_albedo"]


class UsageError(Exception):
    """Bad flags or unusable inputs (exit code 2)."""


# -- argument handling --------------------------------------------------------

def _shared(p: argparse.ArgumentParser, *, needs_in: bool = True) -> None:
    # defaults stay None so a config file can fill the gaps
    if needs_in:
        p.add_argument("--in", dest="input", metavar="PATH", help="input sample or dataset directory")
    p.add_argument("--out", metavar="DIR", help="output directory (created if missing)")
    p.add_argument("--config", metavar="JSON", help="JSON file of flag values; explicit flags win")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker/BLAS thread cap; 1 is fully sequential")
    p.add_argument("-v", "--verbose", action="store_true")


def _camera_flags(p: argparse.ArgumentParser) -> None:
    for name in ("fx", "fy", "cx", "cy"):
        p.add_argument(f"--{name}", type=float, help="intrinsics override")
    p.add_argument("--downsample", help="voxel[=size] | avg64 | none (default voxel=0.03)")
    p.add_argument("--k", type=int, help="neighbours for normal estimation (default 16)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointiid", description="Intrinsic decomposition of RGB-D point clouds.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", help="albedo/shading/light maps for one sample")
    _shared(p)
    _camera_flags(p)
    p.add_argument("--ckpt", help="model checkpoint")

    p = sub.add_parser("train", help="two-stage training on a dataset")
    _shared(p)
    _camera_flags(p)
    p.add_argument("--ckpt", help="start from this checkpoint instead of a fresh init")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--stage", choices=["1", "2", "both"])
    p.add_argument("--loss-weights", type=float, nargs=3, metavar=("REC", "GRAD", "CCR"))
    p.add_argument("--accumulate", type=int, help="samples per optimizer step")

    p = sub.add_parser("eval", help="metric report against GT")
    _shared(p)
    _camera_flags(p)
    p.add_argument("--ckpt")
    p.add_argument("--metrics", nargs="+", choices=sorted(metrics.METRICS))
    p.add_argument("--rescale-reflectance", action="store_true", default=None)
    p.add_argument("--judgments", help="directory of <sample>.json judgment files")
    p.add_argument("--delta", type=float, help="WHDR threshold (default 0.10)")

    p = sub.add_parser("gen-synth", help="render a synthetic dataset")
    _shared(p, needs_in=False)
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--primitive", choices=list(data.PRIMITIVES))
    p.add_argument("--depth-format", choices=["pfm", "png"])

    p = sub.add_parser("normals", help="estimate normals and write normals.png")
    _shared(p)
    _camera_flags(p)

    p = sub.add_parser("perturb-depth", help="inject depth noise into a sample or dataset")
    _shared(p)
    p.add_argument("--mode", choices=["hole", "inaccurate"])
    p.add_argument("--fraction", type=float)
    p.add_argument("--magnitude", type=float)
    return parser


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Merge explicit flags over the config file over ``DEFAULTS``."""
    merged = dict(DEFAULTS)
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            cfg = json.loads(path.read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"cannot parse config {path}: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        merged.update({k.replace("-", "_"): v for k, v in cfg.items()})
    merged.update({k: v for k, v in vars(args).items() if v is not None})
    ns = argparse.Namespace(**merged)
    if getattr(ns, "out", None) is None:
        raise UsageError(f"{ns.command}: --out is required")
    if ns.command != "gen-synth" and getattr(ns, "input", None) is None:
        raise UsageError(f"{ns.command}: --in is required")
    if ns.command in ("decompose", "eval") and getattr(ns, "ckpt", None) is None:
        raise UsageError(f"{ns.command}: --ckpt is required")
    if ns.threads < 1:
        raise UsageError("--threads must be >= 1")
    return ns


def _downsample(ns) -> Downsample:
    try:
        return Downsample.parse(str(ns.downsample))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _intrinsics(ns, sample: data.IntrinsicSample):
    cam = sample.camera()
    over = {k: getattr(ns, k, None) for k in ("fx", "fy", "cx", "cy")}
    over = {k: float(v) for k, v in over.items() if v is not None}
    return dataclasses.replace(cam, **over) if over else cam


def _input_dir(ns) -> Path:
    path = Path(ns.input)
    if not path.is_dir():
        raise UsageError(f"input directory not found: {path}")
    return path


def _load_ckpt(ns) -> model.ModelWeights:
    path = Path(ns.ckpt)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return model.load_weights(path)


def _out_dir(ns) -> Path:
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _items(ns, sample_dirs: list[Path], ds: Downsample):
    items = []
    for d in sample_dirs:
        sample = data.load_sample(d)
        items.append(prepare_item(sample, ds, k=ns.k, intrinsics=_intrinsics(ns, sample)))
    return items


# -- subcommands ---------------------------------------------------------------

def cmd_decompose(ns) -> int:
    src = _input_dir(ns)
    ds = _downsample(ns)
    weights = _load_ckpt(ns)
    sample = data.load_sample(src)
    item = prepare_item(sample, ds, k=ns.k, intrinsics=_intrinsics(ns, sample))
    res = model.decompose(item.cloud, weights, k=ns.k, normals=item.normals)
    out = _out_dir(ns)
    cloud = res.cloud
    data.write_png(out / "albedo.png", cloud.scatter(res.albedo))
    data.write_png(out / "shading.png", cloud.scatter(res.shading))
    data.write_png(out / "recon.png", cloud.scatter(res.recon))
    data.write_png(out / "lightdir.png", (cloud.scatter(res.directions) + 1.0) / 2.0)
    data.write_png(out / "normals.png", (cloud.scatter(res.normals.normals) + 1.0) / 2.0)
    err = float(np.mean((res.recon - item.image) ** 2))
    print(f"recon_mse {err:.6e}")
    return 0


def _write_trace(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, restval="", extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def cmd_train(ns) -> int:
    src = _input_dir(ns)
    dirs = data.sample_dirs(src)
    if not dirs:
        raise UsageError(f"dataset {src} holds no samples")
    if ns.steps < 0:
        raise UsageError("--steps must be >= 0")
    weights = _load_ckpt(ns) if getattr(ns, "ckpt", None) else model.init_weights(ns.seed)
    items = _items(ns, dirs, _downsample(ns))
    cfg = model.TrainConfig(
        steps=ns.steps,
        lr=ns.lr,
        seed=ns.seed,
        accumulate=ns.accumulate,
        loss_weights=tuple(float(x) for x in ns.loss_weights),
    )
    out = _out_dir(ns)
    trace: list[dict] = []
    try:
        if ns.stage in ("1", "both"):
            weights, t = model.train_stage1(items, weights, cfg)
            trace += t
        if ns.stage in ("2", "both"):
            weights, t = model.train_stage2(items, weights, cfg)
            trace += t
    except model.TrainingError as exc:
        _write_trace(out / "trace.csv", trace + exc.trace)
        log.error("%s (partial trace kept in %s)", exc, out / "trace.csv")
        return 1
    model.save_weights(weights, out / "model.ckpt")
    _write_trace(out / "trace.csv", trace)
    for stage in (1, 2):
        rows = [r for r in trace if r["stage"] == stage]
        if rows:
            key = "L_shading" if stage == 1 else "L_albedo"
            print(f"stage {stage}: {key} {rows[0][key]:.6f} -> {rows[-1][key]:.6f}")
    return 0


def _judgments(ns, names: list[str]) -> dict | None:
    if not getattr(ns, "judgments", None):
        return None
    root = Path(ns.judgments)
    if not root.is_dir():
        raise UsageError(f"judgment directory not found: {root}")
    return {n: metrics.load_judgments(root / f"{n}.json") for n in names if (root / f"{n}.json").exists()}


def cmd_eval(ns) -> int:
    src = _input_dir(ns)
    dirs = data.sample_dirs(src)
    if not dirs:
        raise UsageError(f"dataset {src} holds no samples")
    weights = _load_ckpt(ns)
    items = _items(ns, dirs, _downsample(ns))
    judg = _judgments(ns, [it.name for it in items])
    report = evaluate(
        items,
        model_predictor(weights, k=ns.k),
        metric_names=list(ns.metrics),
        rescale_reflectance=bool(ns.rescale_reflectance),
        judgments=judg,
        threads=ns.threads,
        whdr_delta=float(ns.delta),
    )
    out = _out_dir(ns)
    (out / "report.json").write_text(report_json(report))
    table = report_table(report)
    (out / "report.txt").write_text(table)
    sys.stdout.write(table)
    return 0


def cmd_gen_synth(ns) -> int:
    if ns.count < 1:
        raise UsageError("--count must be >= 1")
    base = data.SceneSpec(primitive=ns.primitive, size=ns.size)
    try:
        base.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest = data.generate_dataset(ns.count, ns.out, base=base, seed=ns.seed, depth_format=ns.depth_format)
    print(f"wrote {len(manifest)} samples to {ns.out}")
    return 0


def cmd_normals(ns) -> int:
    """Per-pixel normals; voxel downsampling is not applied here so every valid pixel gets one."""
    src = _input_dir(ns)
    sample = data.load_sample(src)
    ds = _downsample(ns)
    if ds.mode == "avg64":
        sample = average_downsample(sample)
    mask = np.ones(sample.depth.shape, dtype=bool) if sample.valid_mask is None else sample.valid_mask.copy()
    mask &= sample.depth > 0
    cloud = build_point_cloud(np.clip(sample.image, 0.0, 1.0), sample.depth, _intrinsics(ns, sample), mask)
    if len(cloud) < 3:
        raise UsageError(f"{src}: too few valid depth pixels for normal estimation")
    field = estimate_normals(cloud, k=min(ns.k, len(cloud) - 1))
    out = _out_dir(ns)
    data.write_png(out / "normals.png", (cloud.scatter(field.normals) + 1.0) / 2.0)
    if field.degenerate.any():
        log.warning("%d points had degenerate neighbourhoods", int(field.degenerate.sum()))
    return 0


def _perturb_sample(ns, src: Path, dst: Path, seed: int) -> None:
    depth_path = data.find_depth(src)
    if depth_path is None:
        raise UsageError(f"missing depth file {src / 'depth.png'} (or depth.pfm)")
    meta_path = src / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    scale = float(meta.get("depth_scale") or 1.0)
    depth = data.read_depth(depth_path, scale)
    noisy = perturb_depth(depth, ns.mode, ns.fraction, ns.magnitude, seed)
    dst.mkdir(parents=True, exist_ok=True)
    for f in src.iterdir():
        if f.is_file() and f != depth_path:
            shutil.copyfile(f, dst / f.name)
    if depth_path.suffix.lower() == ".png" and noisy.max() > scale:
        scale = float(np.ceil(noisy.max()))
        meta["depth_scale"] = scale
        (dst / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    data.write_depth(dst / depth_path.name, noisy, scale)


def cmd_perturb_depth(ns) -> int:
    src = _input_dir(ns)
    if not 0.0 <= ns.fraction <= 1.0:
        raise UsageError("--fraction must lie in [0, 1]")
    out = _out_dir(ns)
    if (src / "image.png").exists():
        _perturb_sample(ns, src, out, ns.seed)
        return 0
    dirs = data.sample_dirs(src)
    if not dirs:
        raise UsageError(f"{src} is neither a sample nor a dataset directory")
    for i, d in enumerate(dirs):
        _perturb_sample(ns, d, out / d.name, ns.seed + i)
    if (src / "manifest.json").exists():
        shutil.copyfile(src / "manifest.json", out / "manifest.json")
    return 0


COMMANDS = {
    "decompose": cmd_decompose,
    "train": cmd_train,
    "eval": cmd_eval,
    "gen-synth": cmd_gen_synth,
    "normals": cmd_normals,
    "perturb-depth": cmd_perturb_depth,
}

INPUT_ERRORS = (
    UsageError,
    data.SampleFormatError,
    data.SampleInvariantError,
    model.CheckpointError,
    FileNotFoundError,
    ValueError,
)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        ns = resolve(args)
        with threadpool_limits(limits=ns.threads):
            return COMMANDS[ns.command](ns)
    except INPUT_ERRORS as exc:
        print(f"pointiid {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the exit-code contract needs a catch-all
        print(f"pointiid {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
