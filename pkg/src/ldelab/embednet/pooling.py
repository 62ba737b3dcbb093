"""Utterance-level pooling: statistics pooling and learnable dictionary encoding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ldelab.errors import ArgumentError, ShapeError
from ldelab.substrate import tensor as ops
from ldelab.substrate.tensor import Tape, Tensor

SP_EPS = 1e-8
LDE_EPS = 1e-8
POOL_KINDS = ("sp", "lde")
LDE_COMPONENTS = ("mean_only", "mean_and_std")


@dataclass(frozen=True)
class PoolingConfig:
    kind: str = "sp"
    lde_components: str = "mean_and_std"
    clusters: int = 32

    def __post_init__(self):
        if self.kind not in POOL_KINDS:
            raise ArgumentError(f"pooling kind must be one of {POOL_KINDS}, got {self.kind!r}")
        if self.lde_components not in LDE_COMPONENTS:
            raise ArgumentError(f"lde_components must be one of {LDE_COMPONENTS}")
        if self.clusters < 1:
            raise ArgumentError("LDE needs at least one cluster")

    def output_dim(self, frame_dim: int) -> int:
        if self.kind == "sp":
            return 2 * frame_dim
        per = 2 if self.lde_components == "mean_and_std" else 1
        return per * self.clusters * frame_dim


def _batched(frames: Tensor) -> tuple[Tensor, bool]:
    if frames.ndim == 2:
        return frames.reshape(1, *frames.shape), True
    if frames.ndim != 3:
        raise ShapeError(f"pooling expects (T, F) or (B, T, F) frames, got {frames.shape}")
    return frames, False


def sp_pool(frames: Tensor) -> Tensor:
    """``[mean || std]`` over time, population convention, eps 1e-8 under the root."""
    x, single = _batched(frames)
    out = ops.concat([ops.mean(x, axis=1), ops.std(x, axis=1, eps=SP_EPS)], axis=1)
    return out.reshape(-1) if single else out


def _time_sum(x: Tensor) -> Tensor:
    """Sum over axis 1; in double precision the terms are sorted first.

    Sorting makes the result independent of frame order bit for bit, at a
    cost only paid on the verification path.
    """
    if x.dtype != np.float64:
        return ops.sum_(x, axis=1)
    shape = x.shape
    out = np.sort(x.data, axis=1).sum(axis=1)
    return x.tape.record("sorted_sum", (x,), out,
                         lambda g: (np.broadcast_to(np.expand_dims(g, 1), shape),))


def lde_weights(frames: Tensor, centers: Tensor) -> tuple[Tensor, Tensor]:
    """Soft assignments ``w`` (B, T, C) and residuals ``x_t - e_c`` (B, T, C, F)."""
    x, _ = _batched(frames)
    if centers.ndim != 2 or centers.shape[1] != x.shape[2]:
        raise ShapeError(f"lde: frame width {x.shape[2]} does not match dictionary {centers.shape}")
    b, t, f = x.shape
    c = centers.shape[0]
    diff = x.reshape(b, t, 1, f) - centers.reshape(1, 1, c, f)
    dist = ops.sum_(ops.square(diff), axis=3)
    return ops.softmax(-dist, axis=2), diff


def lde_pool(frames: Tensor, centers: Tensor, cfg: PoolingConfig = PoolingConfig(kind="lde")) -> Tensor:
    """Learnable dictionary encoding.

    With r_tc = ||x_t - e_c||^2 and w_tc = softmax_c(-r_tc):
    m_c = sum_t w_tc (x_t - e_c) / Z_c and
    s_c = sqrt(sum_t w_tc (x_t - e_c)^2 + eps) / Z_c, Z_c = sum_t w_tc.
    Output is ``[m_1..m_C]`` or ``[m_1..m_C, s_1..s_C]``.
    """
    x, single = _batched(frames)
    b, t, f = x.shape
    c = centers.shape[0]
    w, diff = lde_weights(x, centers)
    z = _time_sum(w).reshape(b, c, 1)
    w4 = w.reshape(b, t, c, 1)
    weighted = w4 * diff
    means = _time_sum(weighted) / z
    parts = [means.reshape(b, c * f)]
    if cfg.lde_components == "mean_and_std":
        spread = ops.sqrt(_time_sum(weighted * diff) + LDE_EPS) / z
        parts.append(spread.reshape(b, c * f))
    out = parts[0] if len(parts) == 1 else ops.concat(parts, axis=1)
    return out.reshape(-1) if single else out


def lde_as_sp(pooled: np.ndarray, n_frames: int) -> np.ndarray:
    """Map a single-cluster, zero-center LDE vector onto the SP convention.

    With C = 1 and e_1 = 0 every weight is 1 and Z = T, so LDE yields the mean
    and ``sqrt(sum_t x_t^2 + eps) / T``.  The SP standard deviation follows as
    ``sqrt(T s^2 - eps/T - m^2 + eps_sp)``.
    """
    pooled = np.asarray(pooled, dtype=np.float64)
    f = pooled.shape[-1] // 2
    m, s = pooled[..., :f], pooled[..., f:]
    var = n_frames * s * s - LDE_EPS / n_frames - m * m
    return np.concatenate([m, np.sqrt(np.maximum(var, 0.0) + SP_EPS)], axis=-1)


def pool_numpy(frames: np.ndarray, cfg: PoolingConfig, centers: np.ndarray | None = None) -> np.ndarray:
    """Convenience evaluation of either pooling on plain arrays."""
    tape = Tape(grad=False)
    x = tape.leaf(np.asarray(frames))
    if cfg.kind == "sp":
        return sp_pool(x).data
    return lde_pool(x, tape.leaf(np.asarray(centers, dtype=x.dtype)), cfg).data
