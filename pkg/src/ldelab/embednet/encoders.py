"""Frame-level encoders: TDNN (dilated 1-D convolutions) and a small residual 2-D conv net."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ldelab.errors import ArgumentError, ShapeError
from ldelab.substrate import tensor as ops
from ldelab.substrate.rng import RngStream
from ldelab.substrate.tensor import Tensor

ENCODER_KINDS = ("tdnn", "resconv")
BN_MOMENTUM = 0.9
BN_EPS = 1e-5


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "tdnn"
    in_dim: int = 30
    widths: tuple[int, ...] = (512, 512, 512, 512, 512)
    contexts: tuple[int, ...] = (5, 3, 3, 1, 1)
    dilations: tuple[int, ...] = (1, 2, 3, 1, 1)
    activation: str = "relu"
    batch_norm: bool = True
    channels: tuple[int, ...] = (16, 32, 64, 128)
    time_stride: int = 2
    freq_stride: int = 2

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ArgumentError(f"encoder kind must be one of {ENCODER_KINDS}, got {self.kind!r}")
        if self.activation not in ("relu", "linear"):
            raise ArgumentError(f"unknown activation {self.activation!r}")
        if self.kind == "tdnn":
            if not (len(self.widths) == len(self.contexts) == len(self.dilations)) or not self.widths:
                raise ArgumentError("tdnn widths, contexts and dilations must have equal non-zero length")
            if any(c % 2 == 0 or c < 1 for c in self.contexts):
                raise ArgumentError("tdnn contexts must be odd")
        elif not self.channels:
            raise ArgumentError("resconv needs at least one block")

    @property
    def output_dim(self) -> int:
        if self.kind == "tdnn":
            return self.widths[-1]
        f = self.in_dim
        for _ in self.channels:
            f = -(-f // self.freq_stride)
        return f * self.channels[-1]

    def output_frames(self, n_frames: int) -> int:
        if self.kind == "tdnn":
            return n_frames
        t = n_frames
        for _ in self.channels:
            t = -(-t // self.time_stride)
        return t


def _he(rng: RngStream, shape, fan_in: int) -> np.ndarray:
    return rng.normal(shape) * np.sqrt(2.0 / fan_in)


def _bn_init(params: dict, buffers: dict, name: str, width: int) -> None:
    params[f"{name}.gamma"] = np.ones(width)
    params[f"{name}.beta"] = np.zeros(width)
    buffers[f"{name}.mean"] = np.zeros(width)
    buffers[f"{name}.var"] = np.ones(width)


def init_encoder(cfg: EncoderConfig, rng: RngStream) -> tuple[dict, dict]:
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    if cfg.kind == "tdnn":
        fan = cfg.in_dim
        for i, (w, k) in enumerate(zip(cfg.widths, cfg.contexts)):
            params[f"enc.{i}.w"] = _he(rng.child("enc", i), (k, fan, w), k * fan)
            params[f"enc.{i}.b"] = np.zeros(w)
            if cfg.batch_norm:
                _bn_init(params, buffers, f"enc.{i}.bn", w)
            fan = w
    else:
        cin = 1
        for i, c in enumerate(cfg.channels):
            r = rng.child("enc", i)
            params[f"enc.{i}.conv1.w"] = _he(r.child(1), (3, 3, cin, c), 9 * cin)
            params[f"enc.{i}.conv2.w"] = _he(r.child(2), (3, 3, c, c), 9 * c)
            params[f"enc.{i}.short.w"] = _he(r.child(3), (1, 1, cin, c), cin)
            _bn_init(params, buffers, f"enc.{i}.bn1", c)
            _bn_init(params, buffers, f"enc.{i}.bn2", c)
            cin = c
    return params, buffers


class _Norm:
    """Applies batch norm in train or inference mode and collects batch stats."""

    def __init__(self, p: dict[str, Tensor], buffers: dict[str, np.ndarray], training: bool):
        self.p = p
        self.buffers = buffers
        self.training = training
        self.stats: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def __call__(self, x: Tensor, name: str, axes: tuple[int, ...]) -> Tensor:
        running = None if self.training else (self.buffers[f"{name}.mean"], self.buffers[f"{name}.var"])
        out, mu, var = ops.batch_norm(x, self.p[f"{name}.gamma"], self.p[f"{name}.beta"], axes, BN_EPS, running)
        if self.training:
            self.stats[name] = (mu, var)
        return out


def encode(x: Tensor, cfg: EncoderConfig, p: dict[str, Tensor], buffers: dict[str, np.ndarray],
           training: bool = False) -> tuple[Tensor, dict]:
    """Run the encoder on (B, T, F) frames; returns (B, T', F') and batch-norm stats."""
    if x.ndim != 3 or x.shape[2] != cfg.in_dim:
        raise ShapeError(f"encoder expects (B, T, {cfg.in_dim}) input, got {x.shape}")
    norm = _Norm(p, buffers, training)
    if cfg.kind == "tdnn":
        h = x
        for i, d in enumerate(cfg.dilations):
            h = ops.conv1d(h, p[f"enc.{i}.w"], dilation=d) + p[f"enc.{i}.b"]
            if cfg.activation == "relu":
                h = ops.relu(h)
            if cfg.batch_norm:
                h = norm(h, f"enc.{i}.bn", (0, 1))
        return h, norm.stats
    b, t, f = x.shape
    h = x.reshape(b, t, f, 1)
    stride = (cfg.time_stride, cfg.freq_stride)
    for i in range(len(cfg.channels)):
        y = ops.conv2d(h, p[f"enc.{i}.conv1.w"], stride=stride, padding=(1, 1))
        y = ops.relu(norm(y, f"enc.{i}.bn1", (0, 1, 2)))
        y = ops.conv2d(y, p[f"enc.{i}.conv2.w"], padding=(1, 1))
        y = norm(y, f"enc.{i}.bn2", (0, 1, 2))
        shortcut = ops.conv2d(h, p[f"enc.{i}.short.w"], stride=stride)
        h = ops.relu(y + shortcut)
    b, t2, f2, c = h.shape
    return h.reshape(b, t2, f2 * c), norm.stats


def update_running(buffers: dict[str, np.ndarray], stats: dict, momentum: float = BN_MOMENTUM) -> None:
    for name, (mu, var) in stats.items():
        for key, val in ((f"{name}.mean", mu), (f"{name}.var", var)):
            old = buffers[key]
            buffers[key] = (momentum * old + (1.0 - momentum) * val).astype(old.dtype)
