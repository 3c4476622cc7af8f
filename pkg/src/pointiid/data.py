"""Synthetic Lambertian scenes and the on-disk sample format.

A sample directory holds::

    image.png      8-bit RGB
    depth.pfm      32-bit float depth (or depth.png, 16-bit, value/65535 * depth_scale)
    albedo.png     8-bit RGB          (optional)
    shading.png    8-bit RGB          (optional)
    normals.png    8-bit, (n+1)/2     (optional)
    mask.png       8-bit, >0 = valid  (optional)
    meta.json      light position, intrinsics, depth_scale, flags

A dataset directory holds one sub-directory per sample plus
``manifest.json``: a JSON array of ``{"id", "files", "spec"}``.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .geometry import CameraIntrinsics, default_intrinsics

log = logging.getLogger(__name__)

PRIMITIVES = ("sphere", "plane", "sphere-on-plane")
PATTERNS = ("solid", "checker", "two-tone")

# |q(A)q(S) - q(I)| for 8-bit maps in [0, 1] is at most ~1.5 quantisation steps
PRODUCT_TOLERANCE_8BIT = 1.6 / 255.0


class SampleFormatError(ValueError):
    """A sample directory is missing files or holds undecodable data."""


class SampleInvariantError(ValueError):
    """Strict-mode failure of an IntrinsicSample invariant."""


class SampleInvariantWarning(UserWarning):
    pass


@dataclass
class IntrinsicSample:
    image: np.ndarray
    depth: np.ndarray
    albedo: np.ndarray | None = None
    shading: np.ndarray | None = None
    light_position: np.ndarray | None = None
    normals: np.ndarray | None = None
    valid_mask: np.ndarray | None = None
    intrinsics: CameraIntrinsics | None = None
    name: str = ""

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def has_gt(self) -> bool:
        return self.albedo is not None and self.shading is not None

    def camera(self) -> CameraIntrinsics:
        return self.intrinsics or default_intrinsics(self.width, self.height)

    def check(self, tolerance: float = 1e-3, strict: bool = False) -> list[str]:
        """Return invariant violations; raise instead when ``strict``."""
        problems = []
        hw = self.image.shape[:2]
        for label in ("depth", "albedo", "shading", "normals", "valid_mask"):
            m = getattr(self, label)
            if m is not None and m.shape[:2] != hw:
                problems.append(f"{label} is {m.shape[:2]}, image is {hw}")
        if not problems and self.has_gt:
            valid = np.ones(hw, dtype=bool) if self.valid_mask is None else self.valid_mask
            err = np.abs(self.image - self.albedo * self.shading)[valid]
            if err.size and err.max() >= tolerance:
                problems.append(f"image != albedo*shading (max error {err.max():.3g} >= {tolerance:.3g})")
        if problems and strict:
            raise SampleInvariantError(f"{self.name or 'sample'}: " + "; ".join(problems))
        for p in problems:
            warnings.warn(f"{self.name or 'sample'}: {p}", SampleInvariantWarning, stacklevel=2)
        return problems


@dataclass
class SceneSpec:
    primitive: str = "sphere"
    pattern: str = "solid"
    colors: list = field(default_factory=lambda: [[0.8, 0.5, 0.3], [0.2, 0.4, 0.7]])
    checker_period: int = 4
    split: float = 0.5
    light_position: list = field(default_factory=lambda: [2.0, -2.0, -1.0])
    ambient: float = 0.1
    size: int = 32
    sphere_center: list = field(default_factory=lambda: [0.0, 0.0, 2.5])
    sphere_radius: float = 1.5
    plane_depth: float = 4.0
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def validate(self) -> None:
        if self.primitive not in PRIMITIVES:
            raise ValueError(f"unknown primitive {self.primitive!r}")
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown albedo pattern {self.pattern!r}")
        if self.size < 16:
            raise ValueError("image size must be at least 16")
        if not 0.0 <= self.ambient < 1.0:
            raise ValueError("ambient must lie in [0, 1)")
        cols = np.asarray(self.colors, dtype=float)
        if cols.ndim != 2 or cols.shape[1] != 3 or len(cols) < 1 or cols.min() < 0 or cols.max() > 1:
            raise ValueError("colors must be a list of RGB triples in [0, 1]")
        if self.pattern != "solid" and len(cols) < 2:
            raise ValueError(f"pattern {self.pattern!r} needs two colours")
        light = np.asarray(self.light_position, dtype=float)
        if light.shape != (3,):
            raise ValueError("light position must be a 3-vector")
        if "sphere" in self.primitive:
            c = np.asarray(self.sphere_center, dtype=float)
            if self.sphere_radius <= 0 or c[2] - self.sphere_radius <= 0:
                raise ValueError("sphere must have positive radius and lie in front of the camera")
            if abs(np.linalg.norm(light - c) - self.sphere_radius) < 1e-6:
                raise ValueError("light position lies on the sphere surface")
        if "plane" in self.primitive:
            if self.plane_depth <= 0:
                raise ValueError("plane must lie in front of the camera")
            if abs(light[2] - self.plane_depth) < 1e-6:
                raise ValueError("light position lies on the plane")


def _albedo_pattern(spec: SceneSpec, h: int, w: int) -> np.ndarray:
    cols = np.asarray(spec.colors, dtype=np.float64)
    v, u = np.mgrid[0:h, 0:w]
    if spec.pattern == "solid":
        choice = np.zeros((h, w), dtype=int)
    elif spec.pattern == "checker":
        p = max(1, int(spec.checker_period))
        choice = ((u // p) + (v // p)) % 2
    else:
        choice = (u >= spec.split * w).astype(int)
    return cols[choice]


def render_synthetic(spec: SceneSpec) -> IntrinsicSample:
    """Ray-cast a Lambertian scene lit by a point light, with exact GT.

    Shading is ``clip(ambient + (1-ambient)*max(0, N.l), 0, 1)`` with ``l``
    the unit vector towards the light; image = albedo * shading.
    """
    spec.validate()
    n = spec.size
    cam = default_intrinsics(n, n)
    v, u = np.mgrid[0:n, 0:n].astype(np.float64)
    rays = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)

    depth = np.full((n, n), np.inf)
    normals = np.zeros((n, n, 3))

    if "plane" in spec.primitive:
        depth[:] = spec.plane_depth
        normals[:] = (0.0, 0.0, -1.0)
    if "sphere" in spec.primitive:
        c = np.asarray(spec.sphere_center, dtype=np.float64)
        a = (rays * rays).sum(-1)
        b = -2.0 * (rays @ c)
        cc = c @ c - spec.sphere_radius**2
        disc = b * b - 4 * a * cc
        hit = disc >= 0
        t = np.where(hit, (-b - np.sqrt(np.where(hit, disc, 0.0))) / (2 * a), np.inf)
        closer = hit & (t > 0) & (t < depth)
        depth[closer] = t[closer]
        pts = rays * np.where(hit, t, 0.0)[..., None]
        sphere_n = (pts - c) / spec.sphere_radius
        normals[closer] = sphere_n[closer]

    valid = np.isfinite(depth)
    depth = np.where(valid, depth, 0.0)
    points = rays * depth[..., None]
    light = np.asarray(spec.light_position, dtype=np.float64)
    to_light = light - points
    to_light /= np.linalg.norm(to_light, axis=-1, keepdims=True)
    cosine = np.maximum(0.0, (normals * to_light).sum(-1))
    shade = np.clip(spec.ambient + (1.0 - spec.ambient) * cosine, 0.0, 1.0)
    shade = np.where(valid, shade, 0.0)
    shading = np.repeat(shade[..., None], 3, axis=-1)
    albedo = _albedo_pattern(spec, n, n) * valid[..., None]
    image = albedo * shading
    return IntrinsicSample(
        image=image,
        depth=depth,
        albedo=albedo,
        shading=shading,
        light_position=light,
        normals=normals,
        valid_mask=valid,
        intrinsics=cam,
        name=f"synthetic-{spec.seed}",
    )


@dataclass
class Randomization:
    """Ranges for per-sample randomisation in ``generate_dataset``."""

    light_distance: tuple = (2.5, 5.0)
    light_cone_deg: float = 70.0
    color_range: tuple = (0.15, 0.95)
    patterns: tuple = ("solid", "two-tone", "checker")
    ambient: tuple = (0.05, 0.2)
    randomize_light: bool = True
    randomize_albedo: bool = True


def sample_specs(count: int, base: SceneSpec | None = None, ranges: Randomization | None = None, seed: int = 0) -> list[SceneSpec]:
    """Draw ``count`` scene specs around ``base``; deterministic per seed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    base = base or SceneSpec()
    ranges = ranges or Randomization()
    rng = np.random.default_rng(seed)
    centre = np.asarray(base.sphere_center if "sphere" in base.primitive else [0.0, 0.0, base.plane_depth])
    specs = []
    for i in range(count):
        spec = dataclasses.replace(base, seed=int(seed) * 100003 + i)
        if ranges.randomize_light:
            # direction inside a cone around -z (towards the camera side)
            theta = np.deg2rad(ranges.light_cone_deg) * np.sqrt(rng.uniform())
            phi = rng.uniform(0, 2 * np.pi)
            direction = np.array([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), -np.cos(theta)])
            dist = rng.uniform(*ranges.light_distance)
            spec.light_position = (centre + dist * direction).round(6).tolist()
        if ranges.randomize_albedo:
            spec.colors = rng.uniform(*ranges.color_range, size=(2, 3)).round(4).tolist()
            spec.pattern = str(ranges.patterns[rng.integers(len(ranges.patterns))])
            spec.split = float(np.round(rng.uniform(0.3, 0.7), 4))
            spec.checker_period = int(rng.integers(3, 9))
        lo, hi = ranges.ambient
        spec.ambient = float(np.round(rng.uniform(lo, hi), 4))
        specs.append(spec)
    return specs


# -- image I/O --------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path: Path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def write_png16(path: Path, values: np.ndarray) -> None:
    q = np.round(np.clip(values, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(q).save(path, format="PNG")


def read_png(path: Path) -> np.ndarray:
    """Decode a PNG to float in [0, 1]; 16-bit greyscale keeps full range."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.array(im, dtype=np.float64)
                return arr / 65535.0
            if im.mode not in ("RGB", "L"):
                im = im.convert("RGB")
            return np.array(im, dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise SampleFormatError(f"cannot decode image {path}: {exc}") from exc


def write_pfm(path: Path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype="<f4")
    h, w = values.shape[:2]
    header = ("Pf" if values.ndim == 2 else "PF") + f"\n{w} {h}\n-1.0\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(np.flipud(values)).tobytes())


def read_pfm(path: Path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            kind = fh.readline().strip()
            if kind not in (b"Pf", b"PF"):
                raise SampleFormatError(f"{path}: not a PFM file")
            w, h = (int(t) for t in fh.readline().split())
            scale = float(fh.readline().strip())
            dtype = "<f4" if scale < 0 else ">f4"
            channels = 1 if kind == b"Pf" else 3
            data = np.frombuffer(fh.read(), dtype=dtype)
    except (ValueError, OSError) as exc:
        raise SampleFormatError(f"cannot decode depth {path}: {exc}") from exc
    if data.size != w * h * channels:
        raise SampleFormatError(f"{path}: truncated PFM payload")
    shape = (h, w) if channels == 1 else (h, w, 3)
    return np.flipud(data.reshape(shape)).astype(np.float64)


def find_depth(sample_dir: Path) -> Path | None:
    for name in ("depth.pfm", "depth.png"):
        if (sample_dir / name).exists():
            return sample_dir / name
    return None


def read_depth(path: Path, depth_scale: float = 1.0) -> np.ndarray:
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    d = read_png(path)
    if d.ndim == 3:
        d = d[..., 0]
    return d * depth_scale


def write_depth(path: Path, depth: np.ndarray, depth_scale: float = 1.0) -> None:
    if path.suffix.lower() == ".pfm":
        write_pfm(path, depth)
    else:
        write_png16(path, np.asarray(depth) / depth_scale)


def save_sample(sample: IntrinsicSample, out_dir: Path, spec: SceneSpec | None = None, depth_format: str = "pfm") -> list[str]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = ["image.png"]
    write_png(out_dir / "image.png", sample.image)
    depth_name = f"depth.{depth_format}"
    depth_scale = 1.0
    if depth_format == "png":
        depth_scale = float(max(1.0, np.ceil(sample.depth.max())))
    write_depth(out_dir / depth_name, sample.depth, depth_scale)
    files.append(depth_name)
    if sample.albedo is not None:
        write_png(out_dir / "albedo.png", sample.albedo)
        files.append("albedo.png")
    if sample.shading is not None:
        write_png(out_dir / "shading.png", sample.shading)
        files.append("shading.png")
    if sample.normals is not None:
        write_png(out_dir / "normals.png", (sample.normals + 1.0) / 2.0)
        files.append("normals.png")
    if sample.valid_mask is not None:
        write_png(out_dir / "mask.png", sample.valid_mask.astype(np.float64))
        files.append("mask.png")
    meta = {
        "light_position": None if sample.light_position is None else [float(x) for x in sample.light_position],
        "intrinsics": None if sample.intrinsics is None else sample.intrinsics.to_dict(),
        "depth_scale": depth_scale,
        "flags": {"has_albedo": sample.albedo is not None, "has_shading": sample.shading is not None},
    }
    if spec is not None:
        meta["spec"] = spec.to_dict()
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    files.append("meta.json")
    return files


def generate_dataset(
    count: int,
    out_dir: str | Path,
    base: SceneSpec | None = None,
    ranges: Randomization | None = None,
    seed: int = 0,
    depth_format: str = "pfm",
) -> list[dict]:
    """Render ``count`` randomised scenes to ``out_dir`` and write the manifest."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    manifest = []
    for i, spec in enumerate(sample_specs(count, base, ranges, seed)):
        sid = f"{i:05d}"
        sample = render_synthetic(spec)
        files = save_sample(sample, out_dir / sid, spec, depth_format)
        manifest.append({"id": sid, "files": files, "spec": spec.to_dict()})
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_sample(sample_dir: str | Path, strict: bool = False) -> IntrinsicSample:
    """Read one sample directory; GT maps are optional."""
    sample_dir = Path(sample_dir)
    image_path = sample_dir / "image.png"
    if not image_path.exists():
        raise SampleFormatError(f"missing image file {image_path}")
    depth_path = find_depth(sample_dir)
    if depth_path is None:
        raise SampleFormatError(f"missing depth file {sample_dir / 'depth.png'} (or depth.pfm)")
    meta = {}
    if (sample_dir / "meta.json").exists():
        try:
            meta = json.loads((sample_dir / "meta.json").read_text())
        except json.JSONDecodeError as exc:
            raise SampleFormatError(f"cannot parse {sample_dir / 'meta.json'}: {exc}") from exc

    image = read_png(image_path)
    if image.ndim != 3 or image.shape[2] != 3:
        raise SampleFormatError(f"{image_path}: expected an RGB image, got shape {image.shape}")
    depth = read_depth(depth_path, float(meta.get("depth_scale") or 1.0))
    if depth.shape != image.shape[:2]:
        raise SampleFormatError(f"{depth_path}: depth is {depth.shape}, image is {image.shape[:2]}")

    def optional_rgb(name):
        p = sample_dir / name
        if not p.exists():
            return None
        m = read_png(p)
        if m.ndim == 2:
            m = np.repeat(m[..., None], 3, axis=-1)
        return m

    albedo = optional_rgb("albedo.png")
    shading = optional_rgb("shading.png")
    normals = optional_rgb("normals.png")
    if normals is not None:
        normals = normals * 2.0 - 1.0
    mask = None
    if (sample_dir / "mask.png").exists():
        m = read_png(sample_dir / "mask.png")
        mask = (m if m.ndim == 2 else m[..., 0]) > 0.5

    intr = meta.get("intrinsics")
    light = meta.get("light_position")
    sample = IntrinsicSample(
        image=image,
        depth=depth,
        albedo=albedo,
        shading=shading,
        light_position=None if light is None else np.asarray(light, dtype=np.float64),
        normals=normals,
        valid_mask=mask,
        intrinsics=None if intr is None else CameraIntrinsics(**intr),
        name=sample_dir.name,
    )
    sample.check(tolerance=PRODUCT_TOLERANCE_8BIT, strict=strict)
    return sample


def sample_dirs(dataset_dir: str | Path) -> list[Path]:
    """Sample directories of a dataset, in manifest order when one exists."""
    dataset_dir = Path(dataset_dir)
    manifest = dataset_dir / "manifest.json"
    if manifest.exists():
        entries = json.loads(manifest.read_text())
        return [dataset_dir / e["id"] for e in entries]
    if (dataset_dir / "image.png").exists():
        return [dataset_dir]
    return sorted(p for p in dataset_dir.iterdir() if p.is_dir() and (p / "image.png").exists())


def load_dataset(dataset_dir: str | Path, strict: bool = False, split: Sequence[str] | None = None) -> Iterator[IntrinsicSample]:
    """Yield samples; ``split`` restricts to the listed sample ids."""
    keep = None if split is None else set(split)
    for d in sample_dirs(dataset_dir):
        if keep is None or d.name in keep:
            yield load_sample(d, strict=strict)
