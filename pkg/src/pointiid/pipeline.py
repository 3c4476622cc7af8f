"""Glue between samples on disk, point clouds, the model and the metrics."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import metrics as M
from .data import IntrinsicSample
from .geometry import (
    CameraIntrinsics,
    NormalField,
    average_downsample,
    build_point_cloud,
    estimate_normals,
    voxel_downsample,
)
from .losses import Lattice
from .model import ModelWeights, TrainingItem, decompose, light_targets

log = logging.getLogger(__name__)

DEFAULT_METRICS = ("mse", "lmse", "dssim", "si_mse", "si_lmse", "ssim", "psnr")


@dataclass(frozen=True)
class Downsample:
    mode: str = "none"  # none | voxel | avg64
    voxel_size: float = 0.03

    @classmethod
    def parse(cls, text: str) -> "Downsample":
        text = text.strip().lower()
        if text in ("none", ""):
            return cls("none")
        if text in ("avg64", "average64"):
            return cls("avg64")
        if text.startswith("voxel"):
            _, _, size = text.partition("=")
            return cls("voxel", float(size) if size else 0.03)
        raise ValueError(f"unknown downsample mode {text!r} (use voxel[=size], avg64 or none)")


def prepare_item(
    sample: IntrinsicSample,
    downsample: Downsample = Downsample(),
    k: int = 16,
    intrinsics: CameraIntrinsics | None = None,
    drop_holes: bool = True,
) -> TrainingItem:
    """Build the cloud, normals, lattice and per-point GT for one sample.

    With ``drop_holes`` pixels of zero depth are left out of the cloud;
    otherwise they enter it as points at the origin.
    """
    if downsample.mode == "avg64":
        sample = average_downsample(sample)
    cam = intrinsics or sample.camera()
    mask = np.ones(sample.image.shape[:2], dtype=bool) if sample.valid_mask is None else sample.valid_mask.copy()
    if drop_holes:
        mask &= sample.depth > 0
    cloud = build_point_cloud(np.clip(sample.image, 0.0, 1.0), sample.depth, cam, mask)
    if downsample.mode == "voxel":
        cloud = voxel_downsample(cloud, downsample.voxel_size)
    if len(cloud) == 0:
        raise ValueError(f"sample {sample.name!r} produced an empty point cloud")
    if len(cloud) > 1:
        normals = estimate_normals(cloud, k=min(k, len(cloud) - 1))
    else:
        normals = NormalField(np.array([[0.0, 0.0, -1.0]]), np.array([True]))
    albedo = None if sample.albedo is None else cloud.gather(sample.albedo)
    shading = None if sample.shading is None else cloud.gather(sample.shading)
    light = None if sample.light_position is None else light_targets(cloud, sample.light_position)
    return TrainingItem(
        cloud=cloud,
        normals=normals,
        lattice=Lattice.from_cloud(cloud),
        image=cloud.rgb.copy(),
        albedo=albedo,
        shading=shading,
        light_dirs=light,
        name=sample.name,
    )


Predictor = Callable[[TrainingItem], tuple[np.ndarray, np.ndarray]]


def model_predictor(weights: ModelWeights, k: int = 16) -> Predictor:
    def predict(item: TrainingItem):
        res = decompose(item.cloud, weights, k=k, normals=item.normals)
        return res.albedo, res.shading

    return predict


def oracle_predictor(item: TrainingItem):
    return item.albedo, item.shading


def _evaluate_one(item: TrainingItem, predict: Predictor, names, rescale: bool, judgments, delta: float) -> dict:
    albedo_hat, shading_hat = predict(item)
    cloud = item.cloud
    mask = cloud.mask()
    row: dict = {"sample": item.name, "points": len(cloud), "skipped": []}
    albedo_map = cloud.scatter(np.asarray(albedo_hat, dtype=np.float64))
    if rescale:
        albedo_map = M.rescale_reflectance(albedo_map, 0.5)
    shading_map = cloud.scatter(np.asarray(shading_hat, dtype=np.float64))
    for comp, gt, pred in (("albedo", item.albedo, albedo_map), ("shading", item.shading, shading_map)):
        if gt is None:
            row["skipped"] += [f"{comp}.{n}" for n in names]
            continue
        gt_map = cloud.scatter(np.asarray(gt, dtype=np.float64))
        row[comp] = {n: M.compute(n, gt_map, pred, mask) for n in names}
    if "albedo" in row and "shading" in row:
        row["mean"] = {n: (row["albedo"][n] + row["shading"][n]) / 2.0 for n in names}
    if judgments is not None:
        row["whdr"] = M.whdr(albedo_map, judgments, delta)
    return row


def evaluate(
    items: Sequence[TrainingItem],
    predict: Predictor,
    metric_names: Sequence[str] = DEFAULT_METRICS,
    rescale_reflectance: bool = False,
    judgments: dict | None = None,
    threads: int = 1,
    whdr_delta: float = 0.10,
) -> dict:
    """Per-sample and aggregate metrics; aggregates are plain means."""
    for n in metric_names:
        if n not in M.METRICS:
            raise ValueError(f"unknown metric {n!r}")
    judgments = judgments or {}
    args = [(it, predict, list(metric_names), rescale_reflectance, judgments.get(it.name), whdr_delta) for it in items]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda a: _evaluate_one(*a), args))
    else:
        rows = [_evaluate_one(*a) for a in args]

    aggregate: dict = {}
    for comp in ("albedo", "shading", "mean"):
        present = [r[comp] for r in rows if comp in r]
        if present:
            aggregate[comp] = {n: float(np.mean([p[n] for p in present])) for n in metric_names}
    whdrs = [r["whdr"] for r in rows if "whdr" in r]
    if whdrs:
        aggregate["whdr"] = float(np.mean(whdrs))
    skipped = sorted({s for r in rows for s in r["skipped"]})
    if skipped:
        log.warning("metrics skipped for missing ground truth: %s", ", ".join(skipped))
    return {"metrics": list(metric_names), "rescale_reflectance": rescale_reflectance, "samples": rows, "aggregate": aggregate}


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def report_table(report: dict) -> str:
    names = report["metrics"]
    header = ["sample", "component"] + list(names)
    lines = [header]
    for r in report["samples"]:
        for comp in ("albedo", "shading", "mean"):
            if comp in r:
                lines.append([r["sample"], comp] + [f"{r[comp][n]:.6f}" for n in names])
    for comp, vals in report["aggregate"].items():
        if isinstance(vals, dict):
            lines.append(["AGGREGATE", comp] + [f"{vals[n]:.6f}" for n in names])
    if "whdr" in report["aggregate"]:
        lines.append(["AGGREGATE", "whdr", f"{report['aggregate']['whdr']:.6f}"] + [""] * (len(names) - 1))
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in lines) + "\n"
