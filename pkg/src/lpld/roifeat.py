"""Feature maps and RoI-Align.

Cell ``(row, col)`` of a map covers ``[col*scale, (col+1)*scale)`` along x, so
its center sits at scene coordinate ``(col + 0.5) * scale``. RoI-Align takes
one bilinear sample at the center of each bin of a ``P x P`` partition of the
box, clamping sample positions to the map border.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxgeom import as_boxes


@dataclass
class FeatureMap:
    data: np.ndarray  # (D, H, W)
    scale: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"feature map must be (D, H, W) with positive sizes, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature map contains non-finite values")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def copy(self) -> "FeatureMap":
        return FeatureMap(self.data.copy(), self.scale)


@dataclass(frozen=True)
class RoiSampler:
    """Precomputed bilinear taps for a batch of boxes on one map geometry.

    ``index[n, k, t]`` is a flat ``row * W + col`` cell index and
    ``weight[n, k, t]`` its bilinear weight, for box ``n``, bin ``k`` and
    tap ``t`` (4 taps per sample). ``frac[n, k]`` holds the ``(x, y)``
    interpolation fractions the forward pass uses.
    """

    index: np.ndarray
    weight: np.ndarray
    frac: np.ndarray
    pooled: int
    height: int
    width: int

    def __len__(self) -> int:
        return self.index.shape[0]

    def take(self, rows) -> "RoiSampler":
        rows = np.asarray(rows, dtype=np.int64)
        return RoiSampler(self.index[rows], self.weight[rows], self.frac[rows], self.pooled, self.height, self.width)


def make_sampler(boxes, pooled: int, height: int, width: int, scale: float) -> RoiSampler:
    boxes = as_boxes(boxes)
    if pooled < 1:
        raise ValueError("pooled grid side must be >= 1")
    frac = (np.arange(pooled) + 0.5) / pooled
    # sample centers in scene units, (N, P)
    xs = boxes[:, 0:1] + frac[None, :] * (boxes[:, 2:3] - boxes[:, 0:1])
    ys = boxes[:, 1:2] + frac[None, :] * (boxes[:, 3:4] - boxes[:, 1:2])
    u = np.clip(xs / scale - 0.5, 0.0, width - 1)
    v = np.clip(ys / scale - 0.5, 0.0, height - 1)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    u1 = np.minimum(u0 + 1, width - 1)
    v1 = np.minimum(v0 + 1, height - 1)
    fu = u - u0
    fv = v - v0
    n = len(boxes)
    # bins are row-major: bin (a, b) -> y sample a, x sample b
    V0 = np.repeat(v0, pooled, axis=1)
    V1 = np.repeat(v1, pooled, axis=1)
    FV = np.repeat(fv, pooled, axis=1)
    U0 = np.tile(u0, (1, pooled))
    U1 = np.tile(u1, (1, pooled))
    FU = np.tile(fu, (1, pooled))
    index = np.stack([V0 * width + U0, V0 * width + U1, V1 * width + U0, V1 * width + U1], axis=-1)
    weight = np.stack([(1 - FV) * (1 - FU), (1 - FV) * FU, FV * (1 - FU), FV * FU], axis=-1)
    frac = np.stack([FU, FV], axis=-1)
    return RoiSampler(index.reshape(n, pooled * pooled, 4), weight.reshape(n, pooled * pooled, 4),
                      frac.reshape(n, pooled * pooled, 2),
                      pooled, height, width)


def sampler_for(fm: FeatureMap, boxes, pooled: int = 3) -> RoiSampler:
    return make_sampler(boxes, pooled, fm.height, fm.width, fm.scale)


def roi_align_sampled(fm: FeatureMap, sampler: RoiSampler) -> np.ndarray:
    """Pooled features ``(N, D * P * P)``, channel-major per box."""
    if (sampler.height, sampler.width) != (fm.height, fm.width):
        raise ValueError("sampler was built for a different map geometry")
    flat = fm.data.reshape(fm.channels, -1)
    taps = flat[:, sampler.index]  # (D, N, P*P, 4)
    fu, fv = sampler.frac[None, ..., 0], sampler.frac[None, ..., 1]
    # nested lerps so a constant neighbourhood reads back exactly
    top = taps[..., 0] + fu * (taps[..., 1] - taps[..., 0])
    bottom = taps[..., 2] + fu * (taps[..., 3] - taps[..., 2])
    vals = top + fv * (bottom - top)  # (D, N, P*P)
    return np.ascontiguousarray(vals.transpose(1, 0, 2)).reshape(len(sampler), -1)


def roi_align_many(fm: FeatureMap, boxes, pooled: int = 3) -> np.ndarray:
    return roi_align_sampled(fm, sampler_for(fm, boxes, pooled))


def roi_align(fm: FeatureMap, box, pooled: int = 3) -> np.ndarray:
    """RoI feature of a single box as a flat ``D * P * P`` vector."""
    return roi_align_many(fm, [box], pooled)[0]


def roi_align_backward(grad: np.ndarray, sampler: RoiSampler, channels: int) -> np.ndarray:
    """Adjoint of :func:`roi_align_sampled`: scatter ``(N, D*P*P)`` into ``(D, H, W)``."""
    n = len(sampler)
    pp = sampler.pooled * sampler.pooled
    g = np.asarray(grad, dtype=np.float64).reshape(n, channels, pp)
    out = np.zeros((channels, sampler.height * sampler.width))
    contrib = g[:, :, :, None] * sampler.weight[:, None, :, :]  # (N, D, PP, 4)
    idx = np.broadcast_to(sampler.index[:, None, :, :], contrib.shape)
    for d in range(channels):
        np.add.at(out[d], idx[:, d].ravel(), contrib[:, d].ravel())
    return out.reshape(channels, sampler.height, sampler.width)


def cosine_distance(a, b, tiny: float = 1e-12) -> float:
    """``1 - cos(a, b)``; 0 when either vector is (numerically) zero."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < tiny or nb < tiny:
        return 0.0
    return float(1.0 - a @ b / (na * nb))


def cosine_distances(A: np.ndarray, B: np.ndarray, tiny: float = 1e-12) -> np.ndarray:
    """Row-wise :func:`cosine_distance` for two ``(N, F)`` stacks."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    ok = (na >= tiny) & (nb >= tiny)
    out = np.zeros(len(A))
    out[ok] = 1.0 - (A[ok] * B[ok]).sum(axis=1) / (na[ok] * nb[ok])
    return out
