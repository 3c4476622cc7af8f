"""Training objectives over per-point maps that live on an image lattice."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

CCR_EPS = 1e-4


class LatticeError(ValueError):
    """Lattice-based loss requested for points without a pixel map."""


@dataclass
class Lattice:
    """Adjacency of points that map 1:1 onto an H×W pixel grid.

    ``right`` and ``down`` hold index pairs ``(i, j)`` where point ``j``
    sits one pixel right of / below point ``i``.
    """

    pixel_map: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        if self.pixel_map is None:
            raise LatticeError("points carry no pixel map")
        pm = np.asarray(self.pixel_map, dtype=np.int64)
        self.pixel_map = pm
        lookup = np.full((self.height, self.width), -1, dtype=np.int64)
        lookup[pm[:, 1], pm[:, 0]] = np.arange(len(pm))
        self.right = self._pairs(lookup, pm, 1, 0)
        self.down = self._pairs(lookup, pm, 0, 1)

    def _pairs(self, lookup, pm, du, dv):
        u2, v2 = pm[:, 0] + du, pm[:, 1] + dv
        inside = (u2 < self.width) & (v2 < self.height)
        src = np.nonzero(inside)[0]
        dst = lookup[v2[inside], u2[inside]]
        keep = dst >= 0
        return src[keep], dst[keep]

    @property
    def n_points(self) -> int:
        return len(self.pixel_map)

    def adjacent_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        return (
            np.concatenate([self.right[0], self.down[0]]),
            np.concatenate([self.right[1], self.down[1]]),
        )

    @classmethod
    def from_cloud(cls, cloud) -> "Lattice":
        if cloud.pixel_map is None:
            raise LatticeError("point cloud has no pixel map")
        return cls(cloud.pixel_map, cloud.width, cloud.height)


def _tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=None if like is None else like.dtype))


def shading_loss(light_gt, light_hat, shading_gt, shading_hat) -> Tensor:
    """mse(S) + mse(L); the light term is dropped when ``light_gt`` is None."""
    s_hat = _tensor(shading_hat)
    loss = ad.mse(s_hat, _tensor(shading_gt, s_hat))
    if light_gt is not None:
        l_hat = _tensor(light_hat)
        if len(l_hat) != len(s_hat):
            raise DimensionError("light and shading predictions disagree on point count")
        loss = loss + ad.mse(l_hat, _tensor(light_gt, l_hat))
    return loss


def ccr(values, p1, p2, eps: float = CCR_EPS):
    """Cross colour ratios (M_RG, M_RB, M_GB) between points ``p1`` and ``p2``.

    Channels are clamped to ``eps`` first so dark pixels stay finite.
    Works on arrays or Tensors (differentiable in the latter case).
    """
    if not isinstance(values, Tensor):
        v = np.maximum(np.asarray(values, dtype=np.float64), eps)
        a, b = v[p1], v[p2]
        r1, g1, b1 = a[..., 0], a[..., 1], a[..., 2]
        r2, g2, b2 = b[..., 0], b[..., 1], b[..., 2]
        return r1 * g2 / (r2 * g1), r1 * b2 / (r2 * b1), g1 * b2 / (g2 * b1)
    v = ad.clamp_min(values, eps)
    a = ad.take_rows(v, np.asarray(p1))
    b = ad.take_rows(v, np.asarray(p2))
    ch = lambda t, c: ad.take_columns(t, [c])  # noqa: E731
    r1, g1, b1 = ch(a, 0), ch(a, 1), ch(a, 2)
    r2, g2, b2 = ch(b, 0), ch(b, 1), ch(b, 2)
    return r1 * g2 / (r2 * g1), r1 * b2 / (r2 * b1), g1 * b2 / (g2 * b1)


def ccr_loss(albedo_gt, albedo_hat, lattice: Lattice, eps: float = CCR_EPS) -> Tensor:
    """Mean over 4-adjacent pairs of the summed absolute CCR differences."""
    if lattice is None:
        raise LatticeError("ccr_loss needs a lattice")
    a_hat = _tensor(albedo_hat)
    p1, p2 = lattice.adjacent_pairs()
    if len(p1) == 0:
        return Tensor(np.zeros((), dtype=a_hat.dtype))
    gt = ccr(np.asarray(albedo_gt), p1, p2, eps)
    pred = ccr(a_hat, p1, p2, eps)
    total = None
    for m_gt, m_hat in zip(gt, pred):
        term = ad.sum_all(ad.absolute(m_hat - m_gt[:, None].astype(a_hat.dtype)))
        total = term if total is None else total + term
    return total * (1.0 / len(p1))


def gradient_loss(albedo_gt, albedo_hat, lattice: Lattice) -> Tensor:
    """Squared difference of forward-difference gradients in u and v.

    Normalised by 2 * n_points * channels; points without a right/down
    neighbour contribute zero.
    """
    if lattice is None:
        raise LatticeError("gradient_loss needs a lattice")
    a_hat = _tensor(albedo_hat)
    gt = np.asarray(albedo_gt, dtype=a_hat.dtype)
    denom = 2 * lattice.n_points * a_hat.shape[1]
    total = Tensor(np.zeros((), dtype=a_hat.dtype))
    for src, dst in (lattice.right, lattice.down):
        if len(src) == 0:
            continue
        d_hat = ad.take_rows(a_hat, dst) - ad.take_rows(a_hat, src)
        d_gt = gt[dst] - gt[src]
        total = total + ad.sum_all(ad.square(d_hat - d_gt))
    return total * (1.0 / denom)


def reconstruction_loss(albedo_gt, albedo_hat, image_gt, image_hat) -> Tensor:
    a_hat = _tensor(albedo_hat)
    i_hat = _tensor(image_hat)
    if len(a_hat) != len(i_hat):
        raise DimensionError("albedo and image predictions disagree on point count")
    return ad.mse(a_hat, _tensor(albedo_gt, a_hat)) + ad.mse(i_hat, _tensor(image_gt, i_hat))


class AlbedoLoss(NamedTuple):
    total: Tensor
    rec: float
    grad: float
    ccr: float


def albedo_loss(
    albedo_gt,
    albedo_hat,
    image_gt,
    image_hat,
    lattice: Lattice,
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> AlbedoLoss:
    """Weighted sum of reconstruction, gradient and CCR terms.

    The reported parts are the weighted contributions, so
    ``total == rec + grad + ccr`` always holds.
    """
    w_rec, w_grad, w_ccr = weights
    rec = reconstruction_loss(albedo_gt, albedo_hat, image_gt, image_hat) * w_rec
    grad = gradient_loss(albedo_gt, albedo_hat, lattice) * w_grad
    cr = ccr_loss(albedo_gt, albedo_hat, lattice) * w_ccr
    total = rec + grad + cr
    return AlbedoLoss(total, float(rec.data), float(grad.data), float(cr.data))
