"""Miniature speaker-conditioned synthesizer and the injection-site ablation.

Tokens go through an embedding table and a small conv stack (encoder).  Each
output frame reads the encoder position it is aligned to (frame t <- token
t // 4); a prenet on the previous frame feeds a 2-layer tanh recurrent
decoder, and a 3-layer conv postnet refines the decoder output residually.

The speaker embedding is projected to 64 dims and concatenated at the chosen
sites: ``pre`` (every prenet input frame), ``attn`` (every encoder output
position) and ``post`` (every postnet input frame).  A concatenation followed
by a linear layer is computed as a separate weight on the conditioning
vector, so a zero vector leaves every site combination numerically identical.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

import numpy as np

from ldelab import configfile
from ldelab.errors import ArgumentError, ContractError, NumericError, ShapeError
from ldelab.substrate import tensor as ops
from ldelab.substrate.optim import Adam, clip_by_global_norm
from ldelab.substrate.rng import RngStream, derive_seed
from ldelab.substrate.tensor import Tape, Tensor, forward_backward
from ldelab.synthdata.corpus import FRAMES_PER_TOKEN
from ldelab.synthdata.preprocess import preprocess
from ldelab.synthdata.corpus import FeatureSequence

SITES = ("pre", "attn", "post")
ABLATION_SITES = (("pre",), ("attn",), ("pre", "attn"), ("pre", "attn", "post"))
COND_DIM = 64


def parse_sites(text) -> tuple[str, ...]:
    parts = text.replace("+", ",").split(",") if isinstance(text, str) else list(text)
    sites = tuple(s for s in SITES if s in {p.strip() for p in parts})
    if not sites or len(sites) != len({p.strip() for p in parts if p.strip()}):
        raise ArgumentError(f"injection sites must be a non-empty subset of {SITES}, got {text!r}")
    return sites


@dataclass(frozen=True)
class SynthConfig:
    sites: tuple[str, ...] = ("pre", "attn")
    vocab_size: int = 24
    feat_dim: int = 30
    speaker_dim: int = 64
    cond_dim: int = COND_DIM
    token_dim: int = 32
    enc_width: int = 32
    prenet_width: int = 32
    dec_width: int = 64
    post_width: int = 32

    def __post_init__(self):
        object.__setattr__(self, "sites", parse_sites(self.sites))

    @property
    def label(self) -> str:
        return "+".join(self.sites)


@dataclass(frozen=True)
class SynthTrainConfig:
    steps: int = 400
    batch_size: int = 16
    lr: float = 3e-3
    clip: float = 5.0
    seed: int = 0


# --------------------------------------------------------------------------
# parameters


def _param_shapes(cfg: SynthConfig) -> dict[str, tuple[tuple[int, ...], int]]:
    """name -> (shape, fan_in); a name always gets the same values whatever the sites."""
    c, f = cfg.cond_dim, cfg.feat_dim
    shapes = {
        "proj.w": ((cfg.speaker_dim, c), cfg.speaker_dim),
        "proj.b": ((c,), 0),
        "tok.emb": ((cfg.vocab_size, cfg.token_dim), 1),
        "enc.0.w": ((3, cfg.token_dim, cfg.enc_width), 3 * cfg.token_dim),
        "enc.0.b": ((cfg.enc_width,), 0),
        "enc.1.w": ((3, cfg.enc_width, cfg.enc_width), 3 * cfg.enc_width),
        "enc.1.b": ((cfg.enc_width,), 0),
        "ctx.w": ((cfg.enc_width, cfg.dec_width), cfg.enc_width),
        "pre.0.w": ((f, cfg.prenet_width), f),
        "pre.0.b": ((cfg.prenet_width,), 0),
        "pre.1.w": ((cfg.prenet_width, cfg.prenet_width), cfg.prenet_width),
        "pre.1.b": ((cfg.prenet_width,), 0),
        "dec.0.in": ((cfg.prenet_width, cfg.dec_width), cfg.prenet_width),
        "dec.0.rec": ((cfg.dec_width, cfg.dec_width), cfg.dec_width),
        "dec.0.b": ((cfg.dec_width,), 0),
        "dec.1.in": ((cfg.dec_width, cfg.dec_width), cfg.dec_width),
        "dec.1.rec": ((cfg.dec_width, cfg.dec_width), cfg.dec_width),
        "dec.1.b": ((cfg.dec_width,), 0),
        "out.w": ((cfg.dec_width, f), cfg.dec_width),
        "out.b": ((f,), 0),
        "post.0.w": ((5, f, cfg.post_width), 5 * f),
        "post.0.b": ((cfg.post_width,), 0),
        "post.1.w": ((5, cfg.post_width, cfg.post_width), 5 * cfg.post_width),
        "post.1.b": ((cfg.post_width,), 0),
        "post.2.w": ((5, cfg.post_width, f), 5 * cfg.post_width),
        "post.2.b": ((f,), 0),
    }
    if "pre" in cfg.sites:
        shapes["pre.0.cond"] = ((c, cfg.prenet_width), c)
    if "attn" in cfg.sites:
        shapes["ctx.cond"] = ((c, cfg.dec_width), c)
    if "post" in cfg.sites:
        shapes["post.0.cond"] = ((c, cfg.post_width), c)
    return shapes


def init_synth(cfg: SynthConfig, seed: int) -> dict[str, np.ndarray]:
    params = {}
    for name, (shape, fan) in _param_shapes(cfg).items():
        rng = RngStream(derive_seed(seed, "synth", name))
        if fan == 0:
            params[name] = np.zeros(shape)
        elif name.endswith(".rec"):
            params[name] = rng.normal(shape) * (0.5 / np.sqrt(fan))
        elif name == "tok.emb":
            params[name] = rng.normal(shape)
        else:
            params[name] = rng.normal(shape) * np.sqrt(1.0 / fan)
    return params


class SynthModel:
    def __init__(self, config: SynthConfig, params: dict[str, np.ndarray]):
        expected = _param_shapes(config)
        if set(params) != set(expected):
            raise ShapeError(f"synth parameters {sorted(set(params) ^ set(expected))} do not match the config")
        for k, (shape, _) in expected.items():
            if params[k].shape != shape:
                raise ShapeError(f"synth parameter {k} has shape {params[k].shape}, expected {shape}")
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: SynthConfig, seed: int) -> "SynthModel":
        return cls(config, init_synth(config, seed))

    def copy(self) -> "SynthModel":
        return SynthModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k], dtype=np.float64).tobytes())
        return h.hexdigest()

    def bind(self, tape: Tape, trainable: bool = True) -> dict[str, Tensor]:
        return {k: tape.leaf(v, requires_grad=trainable, name=k) for k, v in self.params.items()}

    def to_sections(self) -> dict[str, dict]:
        return {"synth": configfile.to_section(self.config)}

    def generate(self, tokens, speaker_embedding) -> FeatureSequence:
        """Free-running generation of ``4 * len(tokens)`` frames."""
        tape = Tape(grad=False)
        p = self.bind(tape, False)
        cond = project64(tape.leaf(np.asarray(speaker_embedding, dtype=np.float64)[None]), p)
        out = synth_forward(tape, p, self.config, _tokens(tokens, self.config), cond)
        return FeatureSequence("generated", np.array(out.data[0]))


def _tokens(tokens, cfg: SynthConfig) -> np.ndarray:
    tok = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    if np.any(tok < 0) or np.any(tok >= cfg.vocab_size):
        raise ArgumentError(f"token id out of vocabulary [0, {cfg.vocab_size})")
    return tok


# --------------------------------------------------------------------------
# forward pass


def project64(embedding: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Affine map of (B, D) speaker embeddings to (B, 64) conditioning vectors."""
    w = p["proj.w"]
    if embedding.ndim != 2 or embedding.shape[1] != w.shape[0]:
        raise ShapeError(f"speaker embedding width {embedding.shape[-1]} != projection input {w.shape[0]}")
    return embedding @ w + p["proj.b"]


def _encode(tape: Tape, p, cfg: SynthConfig, tokens: np.ndarray, cond: Tensor) -> Tensor:
    """Per-frame decoder context (B, 4L, dec_width)."""
    b, n = tokens.shape
    emb = ops.getitem(p["tok.emb"], tokens)
    h = ops.relu(ops.conv1d(emb, p["enc.0.w"]) + p["enc.0.b"])
    h = ops.relu(ops.conv1d(h, p["enc.1.w"]) + p["enc.1.b"])
    ctx = h @ p["ctx.w"]
    if "attn" in cfg.sites:
        ctx = ctx + (cond @ p["ctx.cond"]).reshape(b, 1, cfg.dec_width)
    align = np.repeat(np.arange(n), FRAMES_PER_TOKEN)
    return ops.getitem(ctx, (slice(None), align))


def _prenet(p, cfg: SynthConfig, prev: Tensor, cond: Tensor) -> Tensor:
    z = prev @ p["pre.0.w"] + p["pre.0.b"]
    if "pre" in cfg.sites:
        c = cond @ p["pre.0.cond"]
        z = z + (c.reshape(c.shape[0], 1, c.shape[1]) if prev.ndim == 3 else c)
    return ops.relu(ops.relu(z) @ p["pre.1.w"] + p["pre.1.b"])


def _postnet(p, cfg: SynthConfig, coarse: Tensor, cond: Tensor) -> Tensor:
    b = coarse.shape[0]
    z = ops.conv1d(coarse, p["post.0.w"]) + p["post.0.b"]
    if "post" in cfg.sites:
        z = z + (cond @ p["post.0.cond"]).reshape(b, 1, cfg.post_width)
    z = ops.tanh(z)
    z = ops.tanh(ops.conv1d(z, p["post.1.w"]) + p["post.1.b"])
    return coarse + ops.conv1d(z, p["post.2.w"]) + p["post.2.b"]


def _stack_time(steps: list[Tensor]) -> Tensor:
    b, h = steps[0].shape
    return ops.concat([s.reshape(b, 1, h) for s in steps], axis=1)


def synth_forward(tape: Tape, p, cfg: SynthConfig, tokens, cond: Tensor, teacher=None,
                  return_coarse: bool = False):
    """Generate (B, 4L, F) frames.

    With ``teacher`` (B, 4L, F) the previous real frame drives the prenet
    (training); otherwise the previous generated frame does (inference).
    """
    tokens = _tokens(tokens, cfg)
    b, n = tokens.shape
    t_out = FRAMES_PER_TOKEN * n
    if cond.shape != (b, cfg.cond_dim):
        raise ShapeError(f"conditioning must be ({b}, {cfg.cond_dim}), got {cond.shape}")
    ctx = _encode(tape, p, cfg, tokens, cond)
    if teacher is not None:
        teacher = np.asarray(teacher)
        if teacher.shape != (b, t_out, cfg.feat_dim):
            raise ShapeError(f"teacher frames must be {(b, t_out, cfg.feat_dim)}, got {teacher.shape}")
        prev = np.concatenate([np.zeros((b, 1, cfg.feat_dim)), teacher[:, :-1]], axis=1)
        pre = _prenet(p, cfg, tape.const(prev.astype(ctx.dtype)), cond)
        drive = ops.transpose(pre @ p["dec.0.in"] + ctx + p["dec.0.b"], (1, 0, 2))
        h = tape.const(np.zeros((b, cfg.dec_width), dtype=ctx.dtype))
        h1 = []
        for t in range(t_out):
            h = ops.tanh(drive[t] + h @ p["dec.0.rec"])
            h1.append(h)
        drive2 = ops.transpose(_stack_time(h1) @ p["dec.1.in"] + p["dec.1.b"], (1, 0, 2))
        h = tape.const(np.zeros((b, cfg.dec_width), dtype=ctx.dtype))
        h2 = []
        for t in range(t_out):
            h = ops.tanh(drive2[t] + h @ p["dec.1.rec"])
            h2.append(h)
        coarse = _stack_time(h2) @ p["out.w"] + p["out.b"]
    else:
        ctx_t = ops.transpose(ctx, (1, 0, 2))
        ha = tape.const(np.zeros((b, cfg.dec_width), dtype=ctx.dtype))
        hb = ha
        frame = tape.const(np.zeros((b, cfg.feat_dim), dtype=ctx.dtype))
        outs = []
        for t in range(t_out):
            pre = _prenet(p, cfg, frame, cond)
            ha = ops.tanh(pre @ p["dec.0.in"] + ctx_t[t] + p["dec.0.b"] + ha @ p["dec.0.rec"])
            hb = ops.tanh(ha @ p["dec.1.in"] + p["dec.1.b"] + hb @ p["dec.1.rec"])
            frame = hb @ p["out.w"] + p["out.b"]
            outs.append(frame)
        coarse = _stack_time(outs)
    refined = _postnet(p, cfg, coarse, cond)
    return (refined, coarse) if return_coarse else refined


def synth_loss(tape: Tape, p, cfg: SynthConfig, tokens, embeddings, frames) -> Tensor:
    """Teacher-forced MSE of the decoder and postnet outputs against real frames."""
    frames = np.asarray(frames)
    cond = project64(tape.const(np.asarray(embeddings, dtype=frames.dtype)), p)
    refined, coarse = synth_forward(tape, p, cfg, tokens, cond, teacher=frames, return_coarse=True)
    target = tape.const(frames)
    return 0.5 * (ops.mean(ops.square(refined - target)) + ops.mean(ops.square(coarse - target)))


# --------------------------------------------------------------------------
# training and evaluation


@dataclass
class SynthTrainResult:
    model: SynthModel
    losses: list[float]


def synth_examples(corpus, speakers) -> list:
    """``(speaker_id, tokens, raw frames)`` for the TTS sentences of ``speakers``."""
    out = []
    for s in speakers:
        for u in corpus.select(s, roles=("tts",)):
            out.append((s, u.tokens, u.raw.frames))
    return out


def train_synth(corpus, speaker_embeddings: dict[str, np.ndarray], cfg: SynthConfig,
                train: SynthTrainConfig = SynthTrainConfig(), init: SynthModel | None = None,
                freeze: bool = False, progress=None) -> SynthTrainResult:
    """Adam on teacher-forced MSE over the training speakers' sentences."""
    speakers = corpus.train_speakers
    missing = [s for s in speakers if s not in speaker_embeddings]
    if missing:
        raise ArgumentError(f"no speaker embedding for training speaker {missing[0]!r}")
    dim = len(next(iter(speaker_embeddings.values())))
    if dim != cfg.speaker_dim:
        raise ShapeError(f"speaker embeddings have dim {dim}, synth config expects {cfg.speaker_dim}")
    examples = synth_examples(corpus, speakers)
    if not examples:
        raise ArgumentError("corpus holds no TTS sentences for the training speakers")
    model = init.copy() if init is not None else SynthModel.init(cfg, derive_seed(train.seed, "synth-init"))
    if model.config != cfg:
        raise ArgumentError("warm-start synthesizer config differs")
    opt = Adam(train.lr)
    losses = []
    for step in range(train.steps):
        rng = RngStream(derive_seed(train.seed, "synth-batch", step))
        k = min(train.batch_size, len(examples))
        idx = np.sort(rng.shuffle(np.arange(len(examples)))[:k])
        batch = [examples[i] for i in idx]
        length = min(len(e[1]) for e in batch)
        tokens = np.stack([e[1][:length] for e in batch])
        frames = np.stack([e[2][:FRAMES_PER_TOKEN * length] for e in batch]).astype(np.float64)
        embs = np.stack([speaker_embeddings[e[0]] for e in batch])
        tape = Tape(grad=not freeze)
        p = model.bind(tape, trainable=not freeze)
        loss = synth_loss(tape, p, cfg, tokens, embs, frames)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"non-finite synthesizer loss at step {step}")
        if not freeze:
            grads = forward_backward(tape, loss)
            grads = {k: grads[t.id] for k, t in p.items()}
            clip_by_global_norm(grads, train.clip)
            opt.step(model.params, grads)
        tape.release()
        losses.append(value)
        if progress is not None:
            progress(step, value)
    return SynthTrainResult(model, losses)


@dataclass
class SimilarityResult:
    seen: dict[str, float] = field(default_factory=dict)
    unseen: dict[str, float] = field(default_factory=dict)
    digest: str = ""

    @property
    def seen_avg(self) -> float:
        return float(np.mean(list(self.seen.values())))

    @property
    def unseen_avg(self) -> float:
        return float(np.mean(list(self.unseen.values())))


def eval_tokens(seed: int, speaker_id: str, index: int, n_tokens: int, vocab_size: int) -> np.ndarray:
    rng = RngStream(derive_seed(seed, "eval-text", speaker_id, index))
    return rng.integers(0, vocab_size, n_tokens).astype(np.int64)


def eval_similarity(synth: SynthModel, sv_model, table, seen, unseen, n_sentences: int = 4, n_tokens: int = 50,
                    seed: int = 0, cond_of=None, bypass=None) -> SimilarityResult:
    """Cosine similarity between synthesized-speech and real-speech averaged embeddings.

    Conditioning and reference both come from ``table`` (for unseen speakers
    that means adaptation utterances only).  ``cond_of`` overrides which
    speaker's embedding conditions the synthesis; ``bypass(speaker, j)``
    substitutes frames for the synthesizer output (harness checks).
    """
    from ldelab.backend import cosine_score

    before = synth.digest()
    result = SimilarityResult()
    for group, speakers in (("seen", seen), ("unseen", unseen)):
        for s in speakers:
            source = cond_of(s) if cond_of is not None else s
            cond = table.speaker_mean(source)
            embs = []
            for j in range(n_sentences):
                if bypass is not None:
                    frames = np.asarray(bypass(s, j))
                else:
                    tokens = eval_tokens(seed, s, j, n_tokens, synth.config.vocab_size)
                    frames = synth.generate(tokens, cond).frames
                if not np.all(np.isfinite(frames)):
                    raise NumericError(f"synthesized frames for speaker {s!r} are not finite")
                seq = preprocess(FeatureSequence(f"{s}-gen{j}", frames.astype(np.float32)))
                embs.append(sv_model.extract(seq).vector.astype(np.float64))
            getattr(result, group)[s] = cosine_score(np.mean(embs, axis=0), table.speaker_mean(s))
    result.digest = synth.digest()
    if result.digest != before:
        raise ContractError("synthesizer parameters changed during evaluation")
    return result


@dataclass(frozen=True)
class AblationRow:
    sites: tuple[str, ...]
    seen_avg: float
    unseen_avg: float
    # parameter digest after training and after evaluation; equal for a zero-shot run
    digests: tuple[str, str] = ("", "")

    def format(self) -> str:
        return f"{'+'.join(self.sites)}\t{self.seen_avg:.6f}\t{self.unseen_avg:.6f}"


def ablate(corpus, sv_model, table, base: SynthConfig = SynthConfig(), train: SynthTrainConfig = SynthTrainConfig(),
           n_seen: int = 4, n_sentences: int = 4, combos=ABLATION_SITES, progress=None) -> list[AblationRow]:
    """Train and evaluate one synthesizer per site combination with shared seeds.

    Seen speakers are the first ``n_seen`` training speakers; unseen ones are
    the held-out development speakers (test speakers if there are none).
    """
    seen = corpus.train_speakers[:n_seen]
    unseen = corpus.speakers("dev") or corpus.speakers("test")
    embeddings = table.speakers
    rows = []
    for sites in combos:
        cfg = dataclasses.replace(base, sites=tuple(sites))
        model = train_synth(corpus, embeddings, cfg, train, progress=progress).model
        trained = model.digest()
        sim = eval_similarity(model, sv_model, table, seen, unseen, n_sentences,
                              n_tokens=corpus.config.tts_tokens, seed=train.seed)
        rows.append(AblationRow(cfg.sites, sim.seen_avg, sim.unseen_avg, (trained, sim.digest)))
    return rows


def format_ablation(rows) -> str:
    return "sites\tseen_avg\tunseen_avg\n" + "".join(r.format() + "\n" for r in rows)


def best_row(rows) -> AblationRow:
    return max(rows, key=lambda r: r.unseen_avg)
