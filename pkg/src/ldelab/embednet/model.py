"""Embedding network: encoder, pooling, embedding projection and speaker classifier."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ldelab import configfile
from ldelab.embednet.encoders import EncoderConfig, encode, init_encoder
from ldelab.embednet.margin import MarginConfig, classify_loss
from ldelab.embednet.pooling import PoolingConfig, lde_pool, sp_pool
from ldelab.errors import ShapeError
from ldelab.substrate.rng import RngStream
from ldelab.substrate.tensor import Tape, Tensor
from ldelab.synthdata.corpus import FeatureSequence

CENTER_INIT_STD = 0.1


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pooling: PoolingConfig = field(default_factory=PoolingConfig)
    margin: MarginConfig = field(default_factory=MarginConfig)
    embed_dim: int = 512
    n_classes: int = 2

    def to_sections(self) -> dict[str, dict]:
        return {"model": {"embed_dim": self.embed_dim, "n_classes": self.n_classes},
                "encoder": configfile.to_section(self.encoder),
                "pooling": configfile.to_section(self.pooling),
                "margin": configfile.to_section(self.margin)}

    @classmethod
    def from_sections(cls, sections: dict[str, dict[str, str]]) -> "ModelConfig":
        model = sections.get("model", {})
        base = cls()
        return cls(encoder=configfile.from_section(EncoderConfig, sections.get("encoder", {}), where="encoder"),
                   pooling=configfile.from_section(PoolingConfig, sections.get("pooling", {}), where="pooling"),
                   margin=configfile.from_section(MarginConfig, sections.get("margin", {}), where="margin"),
                   embed_dim=int(model.get("embed_dim", base.embed_dim)),
                   n_classes=int(model.get("n_classes", base.n_classes)))


@dataclass
class Embedding:
    vector: np.ndarray
    source_id: str


class EmbeddingModel:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.buffers = buffers

    @classmethod
    def init(cls, config: ModelConfig, seed: int, dtype=np.float32) -> "EmbeddingModel":
        rng = RngStream(seed)
        params, buffers = init_encoder(config.encoder, rng.child("encoder"))
        frame_dim = config.encoder.output_dim
        if config.pooling.kind == "lde":
            params["pool.centers"] = rng.child("centers").normal((config.pooling.clusters, frame_dim)) * CENTER_INIT_STD
        pooled = config.pooling.output_dim(frame_dim)
        params["emb.w"] = rng.child("emb").normal((pooled, config.embed_dim)) / np.sqrt(pooled)
        params["emb.b"] = np.zeros(config.embed_dim)
        params["cls.w"] = rng.child("cls").normal((config.embed_dim, config.n_classes)) / np.sqrt(config.embed_dim)
        cast = lambda d: {k: v.astype(dtype) for k, v in d.items()}
        return cls(config, cast(params), cast(buffers))

    def arrays(self) -> dict[str, np.ndarray]:
        """All named arrays in a fixed order: trainable parameters, then buffers."""
        out = dict(self.params)
        out.update({f"buffer:{k}": v for k, v in self.buffers.items()})
        return out

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray]) -> "EmbeddingModel":
        params = {k: v for k, v in arrays.items() if not k.startswith("buffer:")}
        buffers = {k[len("buffer:"):]: v for k, v in arrays.items() if k.startswith("buffer:")}
        return cls(config, params, buffers)

    def astype(self, dtype) -> "EmbeddingModel":
        conv = lambda d: {k: np.asarray(v, dtype=dtype) for k, v in d.items()}
        return EmbeddingModel(self.config, conv(self.params), conv(self.buffers))

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.config, {k: v.copy() for k, v in self.params.items()},
                              {k: v.copy() for k, v in self.buffers.items()})

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def bind(self, tape: Tape, trainable: bool = True) -> dict[str, Tensor]:
        return {k: tape.leaf(v, requires_grad=trainable, name=k) for k, v in self.params.items()}

    def embed(self, tape: Tape, p: dict[str, Tensor], x: Tensor, training: bool = False) -> tuple[Tensor, dict]:
        frames, stats = encode(x, self.config.encoder, p, self.buffers, training)
        if self.config.pooling.kind == "sp":
            pooled = sp_pool(frames)
        else:
            pooled = lde_pool(frames, p["pool.centers"], self.config.pooling)
        emb = pooled @ p["emb.w"] + p["emb.b"]
        return emb, stats

    def loss(self, tape: Tape, p: dict[str, Tensor], x: Tensor, labels, lam: float = 0.0,
             training: bool = True) -> tuple[Tensor, dict]:
        emb, stats = self.embed(tape, p, x, training)
        return classify_loss(emb, p["cls.w"], labels, self.config.margin, lam), stats

    def batch_loss(self, batch: np.ndarray, labels, lam: float = 0.0, training: bool = True) -> float:
        """Loss value without recording gradients."""
        tape = Tape(grad=False)
        loss, _ = self.loss(tape, self.bind(tape, False), tape.leaf(batch.astype(self.dtype)), labels, lam, training)
        return float(loss.data)

    def extract(self, seq: FeatureSequence | np.ndarray) -> Embedding:
        """Inference-mode embedding for one preprocessed utterance."""
        frames = seq.frames if isinstance(seq, FeatureSequence) else np.asarray(seq)
        source = seq.utterance_id if isinstance(seq, FeatureSequence) else ""
        if frames.ndim != 2 or frames.shape[1] != self.config.encoder.in_dim:
            raise ShapeError(f"expected (T, {self.config.encoder.in_dim}) frames, got {frames.shape}")
        tape = Tape(grad=False)
        x = tape.leaf(frames.astype(self.dtype)[None])
        emb, _ = self.embed(tape, self.bind(tape, False), x, training=False)
        return Embedding(np.array(emb.data[0]), source)
