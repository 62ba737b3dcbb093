"""Central-difference checks for every differentiable piece, in double precision.

Each check reduces the output to a scalar through a fixed random weighting so
no coordinate of the gradient is accidentally tiny.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ldelab.embednet.margin import MarginConfig, classify_loss, margin_cos, psi_op
from ldelab.embednet.pooling import PoolingConfig, lde_pool, sp_pool
from ldelab.substrate import tensor as ops
from ldelab.substrate.gradcheck import grad_check, grad_check_params
from ldelab.substrate.rng import RngStream, derive_seed
from ldelab.substrate.tensor import Tensor

TOLERANCE = 1e-6


@dataclass(frozen=True)
class GradResult:
    name: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _weighted(out: Tensor, seed: int) -> Tensor:
    w = RngStream(derive_seed("gradsuite-weights", seed, out.shape)).normal(out.shape) + 0.5
    return ops.sum_(out * out.tape.const(w))


def _unary(name, fn, point):
    return name, lambda: grad_check(lambda x: _weighted(fn(x), 1), point)


def _binary(name, fn, a, b):
    """Checks w.r.t. each argument separately."""
    yield f"{name}[a]", lambda: grad_check(lambda x: _weighted(fn(x, x.tape.const(b)), 2), a)
    yield f"{name}[b]", lambda: grad_check(lambda y: _weighted(fn(y.tape.const(a), y), 3), b)


def _away_from_zero(rng: RngStream, shape, lo: float = 0.2) -> np.ndarray:
    x = rng.normal(shape)
    return np.where(np.abs(x) < lo, np.sign(x + 1e-300) * lo + x, x)


def primitive_checks(seed: int = 0):
    r = RngStream(derive_seed("gradsuite", seed))
    a34 = r.child(1).normal((3, 4))
    b34 = r.child(2).normal((3, 4))
    b4 = r.child(3).normal(4)
    pos = np.abs(r.child(4).normal((3, 4))) + 0.5
    yield from _binary("add", ops.add, a34, b4)
    yield from _binary("sub", ops.sub, a34, b34)
    yield from _binary("mul", ops.mul, a34, b4)
    yield from _binary("div", ops.div, a34, pos)
    yield _unary("power", lambda x: ops.power(x, 1.7), pos)
    yield _unary("square", ops.square, a34)
    yield _unary("relu", ops.relu, _away_from_zero(r.child(5), (3, 4)))
    yield _unary("tanh", ops.tanh, a34)
    yield _unary("exp", ops.exp, a34)
    yield _unary("log", ops.log, pos)
    yield _unary("sqrt", ops.sqrt, pos)
    yield from _binary("matmul", ops.matmul, r.child(6).normal((2, 3, 4)), r.child(7).normal((4, 5)))
    w45 = r.child(8).normal((4, 5))
    bias = r.child(9).normal(5)
    yield _unary("affine[x]", lambda x: ops.affine(x, x.tape.const(w45), x.tape.const(bias)), a34)
    yield _unary("affine[w]", lambda w: ops.affine(w.tape.const(a34), w, w.tape.const(bias)), w45)
    yield _unary("affine[b]", lambda b: ops.affine(b.tape.const(a34), b.tape.const(w45), b), bias)
    yield _unary("sum", lambda x: ops.sum_(x, axis=1, keepdims=True), a34)
    yield _unary("mean", lambda x: ops.mean(x, axis=0), a34)
    yield _unary("std", lambda x: ops.std(x, axis=0, eps=1e-8), a34)
    yield _unary("l2norm", lambda x: ops.l2norm(x, axis=1), a34)
    yield _unary("softmax", lambda x: ops.softmax(x, axis=1), a34)
    yield _unary("log_softmax", lambda x: ops.log_softmax(x, axis=1), a34)
    yield _unary("concat", lambda x: ops.concat([x, ops.square(x)], axis=0), a34)
    yield _unary("getitem", lambda x: ops.getitem(x, (np.array([0, 2, 0]), slice(1, 3))), a34)
    yield _unary("reshape", lambda x: ops.reshape(x, (2, 6)), a34)
    yield _unary("transpose", lambda x: ops.transpose(x), a34)
    x1 = r.child(10).normal((2, 7, 3))
    w1 = r.child(11).normal((3, 3, 4))
    yield _unary("conv1d[x]", lambda x: ops.conv1d(x, x.tape.const(w1), dilation=2), x1)
    yield _unary("conv1d[w]", lambda w: ops.conv1d(w.tape.const(x1), w, dilation=2), w1)
    x2 = r.child(12).normal((2, 5, 6, 2))
    w2 = r.child(13).normal((3, 3, 2, 3))
    yield _unary("conv2d[x]", lambda x: ops.conv2d(x, x.tape.const(w2), stride=(2, 2), padding=(1, 1)), x2)
    yield _unary("conv2d[w]", lambda w: ops.conv2d(w.tape.const(x2), w, stride=(2, 2), padding=(1, 1)), w2)
    xb = r.child(14).normal((4, 5, 3))
    gamma = r.child(15).normal(3)
    beta = r.child(16).normal(3)

    def bn(x, g, b, stats=None):
        # squared so the weighted sum does not cancel against the normalization
        return ops.square(ops.batch_norm(x, g, b, (0, 1), 1e-5, stats)[0])

    yield _unary("batch_norm[x]", lambda x: bn(x, x.tape.const(gamma), x.tape.const(beta)), xb)
    yield _unary("batch_norm[gamma]", lambda g: bn(g.tape.const(xb), g, g.tape.const(beta)), gamma)
    yield _unary("batch_norm[beta]", lambda b: bn(b.tape.const(xb), b.tape.const(gamma), b), beta)
    running = (r.child(17).normal(3), np.abs(r.child(18).normal(3)) + 0.5)
    yield _unary("batch_norm_inference[x]",
                 lambda x: bn(x, x.tape.const(gamma), x.tape.const(beta), running), xb)


def _off_boundary(values: np.ndarray, m: int, margin: float = 0.05) -> bool:
    k = np.arange(m + 1) * np.pi / m
    return bool(np.min(np.abs(values.reshape(-1, 1) - k.reshape(1, -1))) > margin)


def margin_checks(seed: int = 0):
    r = RngStream(derive_seed("gradsuite-margin", seed))
    for m in (1, 2, 3, 4):
        theta = r.child("theta", m).uniform(0.0, np.pi, 6)
        while not _off_boundary(theta, m):
            theta = r.child("theta", m, float(theta[0])).uniform(0.0, np.pi, 6)
        yield _unary(f"psi(m={m})", lambda t, m=m: psi_op(t, m), theta)
        yield _unary(f"margin_cos(m={m})", lambda c, m=m: margin_cos(c, m), np.cos(theta))
    for m in (1, 2, 3, 4):
        cfg = MarginConfig("a_softmax", m)
        labels = np.array([0, 2, 1, 2])
        k = 0
        while True:
            rr = r.child("as", m, k)
            emb = rr.normal((4, 5))
            weights = rr.normal((5, 3))
            wn = weights / np.linalg.norm(weights, axis=0)
            cos = (emb @ wn) / np.linalg.norm(emb, axis=1, keepdims=True)
            if _off_boundary(np.arccos(cos[np.arange(4), labels]), m):
                break
            k += 1
        lam = 2.5
        yield (f"a_softmax(m={m})[emb]",
               lambda e, w=weights, c=cfg: classify_loss(e, e.tape.const(w), labels, c, lam), emb)
        yield (f"a_softmax(m={m})[weights]",
               lambda w, e=emb, c=cfg: classify_loss(w.tape.const(e), w, labels, c, lam), weights)
    emb = r.child("sm").normal((4, 5))
    weights = r.child("smw").normal((5, 3))
    yield ("softmax_ce[emb]",
           lambda e: classify_loss(e, e.tape.const(weights), np.array([0, 1, 2, 1]), MarginConfig()), emb)


def pooling_checks(seed: int = 0):
    r = RngStream(derive_seed("gradsuite-pool", seed))
    frames = r.child("x").normal((2, 6, 3))
    centers = r.child("e").normal((4, 3)) * 0.5
    yield _unary("sp_pool", sp_pool, frames)
    for comp in ("mean_only", "mean_and_std"):
        cfg = PoolingConfig("lde", comp, 4)
        yield _unary(f"lde_pool[{comp}][frames]", lambda x, c=cfg: lde_pool(x, x.tape.const(centers), c), frames)
        yield _unary(f"lde_pool[{comp}][centers]", lambda e, c=cfg: lde_pool(e.tape.const(frames), e, c), centers)


def _named(checks):
    for item in checks:
        if len(item) == 3:
            name, fn, point = item
            yield name, (lambda fn=fn, point=point: grad_check(lambda x: fn(x), point))
        else:
            yield item


def synth_check(seed: int = 0) -> float:
    """Worst relative error over every synthesizer parameter, projection included."""
    from ldelab.ttsablation import SynthConfig, init_synth, synth_loss

    cfg = SynthConfig(sites=("pre", "attn", "post"), vocab_size=5, feat_dim=3, speaker_dim=4, cond_dim=3,
                      token_dim=3, enc_width=3, prenet_width=3, dec_width=4, post_width=3)
    r = RngStream(derive_seed("gradsuite-synth", seed))
    params = {k: v + 0.1 * r.child("jitter", k).normal(v.shape) for k, v in init_synth(cfg, seed).items()}
    tokens = np.array([[0, 3, 1], [4, 2, 2]])
    emb = r.child("emb").normal((2, 4))
    frames = r.child("frames").normal((2, 12, 3))
    report = grad_check_params(lambda tape, p: synth_loss(tape, p, cfg, tokens, emb, frames), params)
    return max(report.values())


def embedding_model_check(seed: int = 0) -> float:
    """Full embedding-network loss (TDNN, LDE, A-softmax) w.r.t. every parameter."""
    from ldelab.embednet.encoders import EncoderConfig
    from ldelab.embednet.model import EmbeddingModel, ModelConfig

    cfg = ModelConfig(EncoderConfig(in_dim=3, widths=(4, 3), contexts=(3, 1), dilations=(1, 1), batch_norm=True),
                      PoolingConfig("lde", "mean_and_std", 2), MarginConfig("a_softmax", 2), embed_dim=3, n_classes=3)
    model = EmbeddingModel.init(cfg, seed, dtype=np.float64)
    r = RngStream(derive_seed("gradsuite-model", seed))
    x = r.child("x").normal((3, 6, 3))
    labels = np.array([0, 1, 2])
    params = {k: v + 0.1 * r.child("jitter", k).normal(v.shape) for k, v in model.params.items()}

    def loss(tape, p):
        return model.loss(tape, p, tape.const(x), labels, lam=3.0, training=True)[0]

    return max(grad_check_params(loss, params).values())


def all_checks(seed: int = 0):
    """``(name, thunk)`` pairs; each thunk returns the worst relative error."""
    yield from primitive_checks(seed)
    yield from _named(margin_checks(seed))
    yield from pooling_checks(seed)
    yield "embedding_model_loss", lambda: embedding_model_check(seed)
    yield "synth_loss", lambda: synth_check(seed)


def run_suite(seed: int = 0) -> list[GradResult]:
    results = []
    for name, thunk in all_checks(seed):
        t0 = time.perf_counter()
        err = thunk()
        results.append(GradResult(name, err, time.perf_counter() - t0))
    return results
