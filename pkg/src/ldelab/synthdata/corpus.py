"""Synthetic speaker population and utterance generator.

Generation law, per frame t of an utterance by speaker s::

    c_t = 0.95 * c_{t-1} + sqrt(1 - 0.95^2) * P[token_t]      (c_0 = P[token_0])
    x_t = A @ c_t + g(token_t) * (B @ latent_s) + noise_std * eps_t

``A`` (F x D_c), ``B`` (F x D_s) and the token table ``P`` (V x D_c) are drawn
once from the population seed.  Tokens last four frames each.  ``g`` is a
per-token voicing gain (1.0 for even token ids, 0.2 for odd ones): the speaker
component is shared by all of a speaker's utterances, but because its
amplitude follows voicing it survives sliding mean normalization instead of
being subtracted away as a constant offset.

The channel then applies one-pole smearing ``y_t = (1-a) x_t + a y_{t-1}``,
a gain, and additive white noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from ldelab.errors import ArgumentError
from ldelab.substrate.rng import RngStream, derive_seed

FRAME_RATE = 100
FRAMES_PER_TOKEN = 4
CONTENT_AR = 0.95
VOICED_GAIN = 1.0
UNVOICED_GAIN = 0.2


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    latent: np.ndarray = field(repr=False)
    population_seed: int = 0


@dataclass(frozen=True)
class ChannelConfig:
    noise_std: float = 0.0
    smear_coeff: float = 0.0
    gain: float = 1.0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ArgumentError(f"noise_std must be >= 0, got {self.noise_std}")
        if not 0.0 <= self.smear_coeff < 1.0:
            raise ArgumentError(f"smear_coeff must lie in [0, 1), got {self.smear_coeff}")
        if self.gain <= 0:
            raise ArgumentError(f"gain must be > 0, got {self.gain}")


CLEAN = ChannelConfig()


@dataclass
class FeatureSequence:
    utterance_id: str
    frames: np.ndarray
    frame_rate: int = FRAME_RATE

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def dim(self) -> int:
        return int(self.frames.shape[1])

    def with_frames(self, frames: np.ndarray) -> "FeatureSequence":
        return FeatureSequence(self.utterance_id, frames, self.frame_rate)


@dataclass(frozen=True)
class GeneratorParams:
    """Population-wide mixing parameters (all derived from the population seed)."""

    feat_dim: int = 30
    content_dim: int = 10
    vocab_size: int = 24
    speaker_scale: float = 2.0
    noise_std: float = 0.2


@lru_cache(maxsize=32)
def _mixing(population_seed: int, d_latent: int, gp: GeneratorParams):
    rng = RngStream(derive_seed(population_seed, "mixing"))
    a = rng.normal((gp.feat_dim, gp.content_dim)) / np.sqrt(gp.content_dim)
    b = rng.normal((gp.feat_dim, d_latent)) * (gp.speaker_scale / np.sqrt(d_latent))
    table = rng.normal((gp.vocab_size, gp.content_dim))
    voicing = np.where(np.arange(gp.vocab_size) % 2 == 0, VOICED_GAIN, UNVOICED_GAIN)
    for arr in (a, b, table, voicing):
        arr.setflags(write=False)
    return a, b, table, voicing


def mixing_matrices(population_seed: int, d_latent: int, gp: GeneratorParams = GeneratorParams()):
    """``(A, B, token_table, voicing)`` for a population."""
    return _mixing(int(population_seed), int(d_latent), gp)


def gen_population(n_speakers: int, d_latent: int = 16, seed: int = 0, prefix: str = "spk") -> list[SpeakerProfile]:
    if n_speakers < 2:
        raise ArgumentError(f"a population needs at least 2 speakers, got {n_speakers}")
    rng = RngStream(derive_seed(seed, "population"))
    profiles = []
    for i in range(n_speakers):
        latent = rng.normal(d_latent)
        latent.setflags(write=False)
        profiles.append(SpeakerProfile(f"{prefix}{i:04d}", latent, seed))
    return profiles


def utterance_seed(population_seed: int, speaker_id: str, index: int, role: str = "utt") -> int:
    return derive_seed(population_seed, speaker_id, role, index)


def random_tokens(rng: RngStream, n_tokens: int, vocab_size: int) -> np.ndarray:
    return rng.integers(0, vocab_size, n_tokens).astype(np.int64)


def gen_utterance(speaker: SpeakerProfile, duration_s: float, channel: ChannelConfig = CLEAN, utt_seed: int = 0,
                  tokens=None, utterance_id: str | None = None,
                  gp: GeneratorParams = GeneratorParams()) -> FeatureSequence:
    """Render ``round(100 * duration_s)`` frames for ``speaker``.

    ``tokens`` fixes the content; by default it is drawn from the utterance
    stream.  Output frames are float32.
    """
    if not duration_s > 0:
        raise ArgumentError(f"duration must be positive, got {duration_s}")
    n_frames = max(1, int(round(FRAME_RATE * duration_s)))
    a, b, table, voicing = mixing_matrices(speaker.population_seed, len(speaker.latent), gp)
    rng = RngStream(utt_seed)
    n_tok = -(-n_frames // FRAMES_PER_TOKEN)
    if tokens is None:
        tokens = random_tokens(rng.child("tokens"), n_tok, gp.vocab_size)
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size < n_tok:
        raise ArgumentError(f"{tokens.size} tokens cannot cover {n_frames} frames")
    if np.any(tokens < 0) or np.any(tokens >= gp.vocab_size):
        raise ArgumentError("token id out of vocabulary")
    per_frame = np.repeat(tokens, FRAMES_PER_TOKEN)[:n_frames]

    drive = table[per_frame]
    content = np.empty_like(drive)
    content[0] = drive[0]
    k = np.sqrt(1.0 - CONTENT_AR ** 2)
    for t in range(1, n_frames):
        content[t] = CONTENT_AR * content[t - 1] + k * drive[t]
    speaker_part = b @ speaker.latent
    x = content @ a.T + voicing[per_frame][:, None] * speaker_part[None, :]
    x = x + gp.noise_std * rng.child("noise").normal((n_frames, gp.feat_dim))

    if channel.smear_coeff > 0:
        y = np.empty_like(x)
        y[0] = x[0]
        for t in range(1, n_frames):
            y[t] = (1.0 - channel.smear_coeff) * x[t] + channel.smear_coeff * y[t - 1]
        x = y
    x = channel.gain * x
    if channel.noise_std > 0:
        x = x + channel.noise_std * rng.child("channel").normal(x.shape)
    uid = utterance_id or f"{speaker.speaker_id}-{utt_seed:016x}"
    return FeatureSequence(uid, x.astype(np.float32))


def random_channel(rng: RngStream) -> ChannelConfig:
    """A mild random degradation standing in for reverberation/noise augmentation."""
    return ChannelConfig(noise_std=float(rng.uniform(0.1, 0.5)),
                         smear_coeff=float(rng.uniform(0.0, 0.6)),
                         gain=float(rng.uniform(0.7, 1.3)))
