"""PointNet-style subnets for albedo, light direction and shading.

Each subnet is a per-point MLP encoder, a max-pooled global feature that is
tiled back onto every point and concatenated with the 64-wide mid feature,
and a per-point MLP decoder down to 3 channels.
"""

from __future__ import annotations

import copy
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Adam, DimensionError, NonFiniteError, Tensor
from .geometry import NormalField, PointCloud, estimate_normals

log = logging.getLogger(__name__)

ACTIVATIONS = {"none": 0, "relu": 1, "tanh": 2}
ACTIVATION_NAMES = {v: k for k, v in ACTIVATIONS.items()}
MAGIC = b"POINTNETIID"
FORMAT_VERSION = 1
SUBNETS = ("albedo", "direction", "shader")
OUTPUT_INIT_SCALE = 0.1
RELU_OUTPUT_BIAS = 0.5


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class InferenceError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    """Training aborted; ``trace`` holds the rows logged so far."""

    def __init__(self, message: str, trace: list[dict]):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class SubnetArch:
    mid_widths: tuple = (6, 64, 64)
    prepool_widths: tuple = (64, 128, 1024)
    decoder_widths: tuple = (1088, 512, 256, 128, 3)
    decoder_activations: tuple = ("relu", "relu", "relu", "relu")

    def __post_init__(self):
        if self.mid_widths[0] != 6:
            raise CheckpointShapeError(f"subnet input must have 6 channels, got {self.mid_widths[0]}")
        if self.mid_widths[-1] != self.prepool_widths[0]:
            raise CheckpointShapeError("pre-pool encoder must start at the mid width")
        if self.decoder_widths[0] != self.mid_widths[-1] + self.prepool_widths[-1]:
            raise CheckpointShapeError("decoder input must equal mid + global width")
        if self.decoder_widths[-1] != 3:
            raise CheckpointShapeError("decoder must output 3 channels")
        if len(self.decoder_activations) != len(self.decoder_widths) - 1:
            raise CheckpointShapeError("one activation per decoder layer")
        for a in self.decoder_activations:
            if a not in ACTIVATIONS:
                raise CheckpointShapeError(f"unknown activation {a!r}")

    @property
    def final_activation(self) -> str:
        return self.decoder_activations[-1]

    def layers(self) -> list[tuple[int, int, str]]:
        out = []
        for widths, acts in (
            (self.mid_widths, ["relu"] * (len(self.mid_widths) - 1)),
            (self.prepool_widths, ["relu"] * (len(self.prepool_widths) - 1)),
            (self.decoder_widths, list(self.decoder_activations)),
        ):
            out += [(widths[i], widths[i + 1], acts[i]) for i in range(len(widths) - 1)]
        return out

    @classmethod
    def albedo(cls) -> "SubnetArch":
        return cls()

    @classmethod
    def direction(cls) -> "SubnetArch":
        return cls(decoder_activations=("relu", "relu", "tanh", "tanh"))

    @classmethod
    def shader(cls) -> "SubnetArch":
        return cls()


class Subnet:
    def __init__(self, arch: SubnetArch, params: list[Tensor]):
        self.arch = arch
        self.params = params
        expected = []
        for c_in, c_out, _ in arch.layers():
            expected += [(c_in, c_out), (c_out,)]
        got = [p.shape for p in params]
        if got != expected:
            raise CheckpointShapeError(f"parameter shapes {got} do not match descriptor {expected}")

    @classmethod
    def init(cls, arch: SubnetArch, rng: np.random.Generator, dtype=np.float32) -> "Subnet":
        """Kaiming-uniform weights and zero biases, except the output layer.

        The output layer is shrunk by ``OUTPUT_INIT_SCALE`` and, behind a
        final ReLU, biased to ``RELU_OUTPUT_BIAS`` so no channel starts dead.
        """
        params = []
        layers = arch.layers()
        for i, (c_in, c_out, act) in enumerate(layers):
            w = ad.kaiming_uniform(c_in, c_out, rng, dtype)
            b = np.zeros(c_out, dtype=dtype)
            if i == len(layers) - 1:
                w *= OUTPUT_INIT_SCALE
                if act == "relu":
                    b[:] = RELU_OUTPUT_BIAS
            params.append(Tensor(w, requires_grad=True))
            params.append(Tensor(b, requires_grad=True))
        return cls(arch, params)

    def set_trainable(self, flag: bool) -> None:
        for p in self.params:
            p.requires_grad = flag
            p.grad = np.zeros_like(p.data) if flag else None

    def astype(self, dtype) -> "Subnet":
        return Subnet(self.arch, [Tensor(p.data.astype(dtype), requires_grad=p.requires_grad) for p in self.params])

    def __call__(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        if n < 1:
            raise DimensionError("subnet needs at least one point")
        layers = self.arch.layers()
        n_mid = len(self.arch.mid_widths) - 1
        n_pre = len(self.arch.prepool_widths) - 1
        h = x
        li = 0
        for _ in range(n_mid):
            h = ad.relu(ad.linear(h, self.params[2 * li], self.params[2 * li + 1]))
            li += 1
        mid = h
        for _ in range(n_pre):
            h = ad.relu(ad.linear(h, self.params[2 * li], self.params[2 * li + 1]))
            li += 1
        global_feature, _ = ad.max_pool_points(h)
        h = ad.concat_features(mid, ad.repeat_global(global_feature, n))
        while li < len(layers):
            h = ad.linear(h, self.params[2 * li], self.params[2 * li + 1])
            act = layers[li][2]
            if act == "relu":
                h = ad.relu(h)
            elif act == "tanh":
                h = ad.tanh(h)
            li += 1
        return h


@dataclass
class ModelWeights:
    albedo: Subnet
    direction: Subnet
    shader: Subnet
    version: int = FORMAT_VERSION

    def subnets(self) -> list[Subnet]:
        return [self.albedo, self.direction, self.shader]

    def copy(self) -> "ModelWeights":
        return copy.deepcopy(self)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for s in self.subnets() for p in s.params])


def init_weights(seed: int = 0, dtype=np.float32) -> ModelWeights:
    rng = np.random.default_rng(seed)
    return ModelWeights(
        Subnet.init(SubnetArch.albedo(), rng, dtype),
        Subnet.init(SubnetArch.direction(), rng, dtype),
        Subnet.init(SubnetArch.shader(), rng, dtype),
    )


# -- forward passes ---------------------------------------------------------

def _input(cloud: PointCloud | np.ndarray, dtype) -> Tensor:
    """Network input: the cloud with x, y, d shifted to zero mean."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    if pts.ndim != 2 or pts.shape[1] != 6 or len(pts) == 0:
        raise DimensionError(f"expected a non-empty n×6 cloud, got {pts.shape}")
    feats = np.array(pts, dtype=np.float64)
    if not np.isfinite(feats).all():
        raise InferenceError("input cloud contains non-finite values")
    # sorting first makes the mean independent of point order, bit for bit
    feats[:, :3] -= np.sort(feats[:, :3], axis=0).mean(axis=0)
    return Tensor(feats.astype(dtype))


def _dtype(weights: ModelWeights):
    return weights.albedo.params[0].dtype


def albedo_tensor(x: Tensor, weights: ModelWeights) -> Tensor:
    return weights.albedo(x)


def direction_tensor(x: Tensor, weights: ModelWeights) -> tuple[Tensor, Tensor, np.ndarray]:
    raw = weights.direction(x)
    unit, fallback = ad.normalize_rows(raw)
    return unit, raw, fallback


def shader_tensor(normals, directions: Tensor, weights: ModelWeights) -> Tensor:
    nrm = normals.normals if isinstance(normals, NormalField) else normals
    nrm = Tensor(np.asarray(nrm, dtype=directions.dtype))
    if len(nrm) != len(directions):
        raise DimensionError(f"{len(nrm)} normals vs {len(directions)} directions")
    return weights.shader(ad.concat_features(nrm, directions))


def _guard(fn, *args):
    try:
        return fn(*args)
    except NonFiniteError as exc:
        raise InferenceError(str(exc)) from exc


def forward_albedo(cloud, weights: ModelWeights) -> np.ndarray:
    return _guard(albedo_tensor, _input(cloud, _dtype(weights)), weights).data


def forward_direction(cloud, weights: ModelWeights) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unit directions, raw Tanh outputs, and rows that fell back to (0,0,-1)."""
    unit, raw, fallback = _guard(direction_tensor, _input(cloud, _dtype(weights)), weights)
    return unit.data, raw.data, fallback


def forward_shader(normals, directions, weights: ModelWeights) -> np.ndarray:
    d = Tensor(np.asarray(directions, dtype=_dtype(weights)))
    return _guard(shader_tensor, normals, d, weights).data


@dataclass
class DecompositionResult:
    cloud: PointCloud
    albedo: np.ndarray
    shading: np.ndarray
    directions: np.ndarray
    normals: NormalField
    recon: np.ndarray = field(init=False)
    direction_fallback: np.ndarray | None = None

    def __post_init__(self):
        self.recon = self.albedo * self.shading

    def lattice(self, name: str, fill: float = 0.0) -> np.ndarray:
        values = self.normals.normals if name == "normals" else getattr(self, name)
        return self.cloud.scatter(values, fill)


def decompose(cloud: PointCloud, weights: ModelWeights, k: int = 16, normals: NormalField | None = None) -> DecompositionResult:
    if len(cloud) == 0:
        raise DimensionError("cannot decompose an empty cloud")
    if normals is None:
        normals = estimate_normals(cloud, k=min(k, len(cloud) - 1)) if len(cloud) > 1 else NormalField(np.array([[0.0, 0.0, -1.0]]))
    albedo = forward_albedo(cloud, weights)
    directions, _, fallback = forward_direction(cloud, weights)
    shading = forward_shader(normals, directions, weights)
    return DecompositionResult(cloud, albedo, shading, directions, normals, direction_fallback=fallback)


# -- training ---------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 3e-4
    seed: int = 0
    accumulate: int = 1
    loss_weights: tuple = (1.0, 1.0, 1.0)
    log_every: int = 100
    lr_schedule: str = "cosine"  # or "constant"
    grad_clip: float | None = 10.0  # global L2 norm; None disables

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "constant" or self.steps <= 1:
            return self.lr
        if self.lr_schedule != "cosine":
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * step / self.steps))


@dataclass
class TrainingItem:
    """One cloud with everything the losses need, precomputed."""

    cloud: PointCloud
    normals: NormalField
    lattice: losses.Lattice | None
    image: np.ndarray
    albedo: np.ndarray | None
    shading: np.ndarray | None
    light_dirs: np.ndarray | None = None
    name: str = ""


def light_targets(cloud: PointCloud, light_position) -> np.ndarray:
    """Unit vectors from each point towards the light."""
    v = np.asarray(light_position, dtype=np.float64)[None, :] - cloud.xyz
    return v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)


def _schedule(n_items: int, steps: int, accumulate: int, seed: int):
    rng = np.random.default_rng(seed)
    order: list[int] = []
    for _ in range(steps):
        batch = []
        for _ in range(accumulate):
            if not order:
                order = list(rng.permutation(n_items))
            batch.append(int(order.pop()))
        yield batch


def stage1_loss(item: TrainingItem, weights: ModelWeights) -> Tensor:
    x = _input(item.cloud, _dtype(weights))
    directions, _, _ = direction_tensor(x, weights)
    shading = shader_tensor(item.normals, directions, weights)
    return losses.shading_loss(item.light_dirs, directions, item.shading, shading)


def _clipped(grads: list[np.ndarray], max_norm: float | None) -> list[np.ndarray]:
    if max_norm is None:
        return grads
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if not math.isfinite(norm) or norm <= max_norm:
        return grads
    scale = max_norm / norm
    return [g * np.asarray(scale, dtype=g.dtype) for g in grads]


def _run_stage(items, weights, config, trainable: Subnet | Sequence[Subnet], loss_fn, stage: int):
    if not items:
        raise ValueError("empty training set")
    subnets = [trainable] if isinstance(trainable, Subnet) else list(trainable)
    params = [p for s in subnets for p in s.params]
    opt = Adam(params, lr=config.lr)
    trace: list[dict] = []
    for step, batch in enumerate(_schedule(len(items), config.steps, config.accumulate, config.seed + stage)):
        opt.zero_grad()
        opt.lr = config.lr_at(step)
        rows = []
        try:
            for i in batch:
                loss, row = loss_fn(items[i], weights)
                if not math.isfinite(float(loss.data)):
                    raise NonFiniteError("loss is not finite")
                (loss * (1.0 / len(batch))).backward()
                rows.append(row)
            opt.step(_clipped([p.grad for p in params], config.grad_clip))
        except (NonFiniteError, ad.OptimizerError) as exc:
            raise TrainingError(f"stage {stage} aborted at step {step}: {exc}", trace) from exc
        entry = {"stage": stage, "step": step}
        for key in rows[0]:
            entry[key] = float(np.mean([r[key] for r in rows]))
        trace.append(entry)
        if config.log_every and step % config.log_every == 0:
            log.info("stage %d step %d %s", stage, step, {k: round(v, 6) for k, v in entry.items() if k.startswith("L_")})
    return trace


def train_stage1(items: Sequence[TrainingItem], weights: ModelWeights, config: TrainConfig):
    """Fit direction net and shader to GT shading (and light when known).

    Returns updated weights (a copy) and the per-step loss trace.
    """
    for it in items:
        if it.shading is None:
            raise ValueError(f"sample {it.name!r} has no shading GT")
    weights = weights.copy()
    weights.albedo.set_trainable(False)
    weights.direction.set_trainable(True)
    weights.shader.set_trainable(True)

    def loss_fn(item, w):
        loss = stage1_loss(item, w)
        return loss, {"L_shading": float(loss.data)}

    trace = _run_stage(list(items), weights, config, [weights.direction, weights.shader], loss_fn, 1)
    weights.albedo.set_trainable(True)
    return weights, trace


def frozen_shading(item: TrainingItem, weights: ModelWeights) -> np.ndarray:
    x = _input(item.cloud, _dtype(weights))
    directions, _, _ = direction_tensor(x, weights)
    return shader_tensor(item.normals, directions, weights).data


def stage2_loss(item: TrainingItem, weights: ModelWeights, shading: np.ndarray, loss_weights=(1.0, 1.0, 1.0)):
    x = _input(item.cloud, _dtype(weights))
    a_hat = albedo_tensor(x, weights)
    i_hat = a_hat * Tensor(shading.astype(a_hat.dtype))
    return losses.albedo_loss(item.albedo, a_hat, item.image, i_hat, item.lattice, loss_weights)


def train_stage2(items: Sequence[TrainingItem], weights: ModelWeights, config: TrainConfig):
    """Fit the albedo net with direction net and shader frozen.

    Frozen shading is computed once per item; frozen parameters are never
    touched by the optimizer.
    """
    for it in items:
        if it.albedo is None:
            raise ValueError(f"sample {it.name!r} has no albedo GT")
        if it.lattice is None:
            raise losses.LatticeError(f"sample {it.name!r} has no lattice")
    weights = weights.copy()
    weights.direction.set_trainable(False)
    weights.shader.set_trainable(False)
    weights.albedo.set_trainable(True)
    items = list(items)
    cache = {id(it): frozen_shading(it, weights) for it in items}

    def loss_fn(item, w):
        res = stage2_loss(item, w, cache[id(item)], config.loss_weights)
        row = {"L_rec": res.rec, "L_grad": res.grad, "L_ccr": res.ccr, "L_albedo": float(res.total.data)}
        return res.total, row

    trace = _run_stage(items, weights, config, weights.albedo, loss_fn, 2)
    weights.direction.set_trainable(True)
    weights.shader.set_trainable(True)
    return weights, trace


# -- checkpoints ------------------------------------------------------------

def save_weights(weights: ModelWeights, path: str | Path) -> None:
    """Write the binary checkpoint (little-endian throughout).

    Layout: magic, u32 version, u32 subnet count, then per subnet
    ``u32 n_mid, u32 n_prepool, u32 n_decoder`` followed by
    ``u32 in, u32 out, u8 activation`` per layer, then all parameters as
    float32 (weight row-major, then bias, per layer, subnet by subnet).
    """
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, 3)]
    for sub in weights.subnets():
        a = sub.arch
        chunks.append(struct.pack("<III", len(a.mid_widths) - 1, len(a.prepool_widths) - 1, len(a.decoder_widths) - 1))
        for c_in, c_out, act in a.layers():
            chunks.append(struct.pack("<IIB", c_in, c_out, ACTIVATIONS[act]))
    for sub in weights.subnets():
        for p in sub.params:
            chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path: str | Path) -> ModelWeights:
    buf = Path(path).read_bytes()
    if len(buf) < len(MAGIC) + 8:
        raise CorruptCheckpointError(f"{path}: file too short")
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes")
    pos = len(MAGIC)
    version, count = struct.unpack_from("<II", buf, pos)
    pos += 8
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if count != 3:
        raise CheckpointShapeError(f"{path}: expected 3 subnets, found {count}")
    try:
        archs = []
        for _ in range(count):
            n_mid, n_pre, n_dec = struct.unpack_from("<III", buf, pos)
            pos += 12
            layers = []
            for _ in range(n_mid + n_pre + n_dec):
                layers.append(struct.unpack_from("<IIB", buf, pos))
                pos += 9
            archs.append(_arch_from_layers(layers, n_mid, n_pre, n_dec))
    except struct.error as exc:
        raise CorruptCheckpointError(f"{path}: truncated descriptor") from exc

    need = sum(4 * (i * o + o) for a in archs for i, o, _ in a.layers())
    if len(buf) - pos != need:
        raise CorruptCheckpointError(f"{path}: expected {need} parameter bytes, found {len(buf) - pos}")
    subnets = []
    for arch in archs:
        params = []
        for c_in, c_out, _ in arch.layers():
            for shape in ((c_in, c_out), (c_out,)):
                size = int(np.prod(shape))
                arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
                pos += 4 * size
                params.append(Tensor(arr, requires_grad=True))
        subnets.append(Subnet(arch, params))
    return ModelWeights(*subnets, version=version)


def _arch_from_layers(layers, n_mid, n_pre, n_dec) -> SubnetArch:
    if n_mid < 1 or n_pre < 1 or n_dec < 1:
        raise CheckpointShapeError("every stage needs at least one layer")
    mid = layers[:n_mid]
    pre = layers[n_mid : n_mid + n_pre]
    dec = layers[n_mid + n_pre :]

    def chain(ls):
        for a, b in zip(ls, ls[1:]):
            if a[1] != b[0]:
                raise CheckpointShapeError(f"layer widths do not chain: {a[:2]} -> {b[:2]}")
        return (ls[0][0],) + tuple(l[1] for l in ls)

    acts = []
    for _, _, code in dec:
        if code not in ACTIVATION_NAMES:
            raise CheckpointShapeError(f"unknown activation code {code}")
        acts.append(ACTIVATION_NAMES[code])
    return SubnetArch(chain(mid), chain(pre), chain(dec), tuple(acts))
