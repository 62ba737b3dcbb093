"""Frame-level preprocessing: sliding mean normalization, energy VAD, chunking."""

from __future__ import annotations

import numpy as np

from ldelab.errors import ArgumentError
from ldelab.substrate.rng import RngStream
from ldelab.synthdata.corpus import FRAME_RATE, FeatureSequence

DEFAULT_CMN_WINDOW = 300
DEFAULT_VAD_THRESHOLD = 0.25


def sliding_mean_norm(seq: FeatureSequence, window_frames: int = DEFAULT_CMN_WINDOW) -> FeatureSequence:
    """Subtract the per-dimension mean of a centered window around each frame.

    The window for frame t spans ``[t - (w-1)//2, t + w//2]`` clipped to the
    utterance, so edge frames average over fewer frames.
    """
    if window_frames < 1:
        raise ArgumentError(f"window must be >= 1 frame, got {window_frames}")
    x = seq.frames.astype(np.float64)
    n = x.shape[0]
    csum = np.vstack([np.zeros((1, x.shape[1])), np.cumsum(x, axis=0)])
    t = np.arange(n)
    lo = np.maximum(t - (window_frames - 1) // 2, 0)
    hi = np.minimum(t + window_frames // 2, n - 1) + 1
    means = (csum[hi] - csum[lo]) / (hi - lo)[:, None]
    return seq.with_frames((x - means).astype(seq.frames.dtype))


def energy_vad(seq: FeatureSequence, rel_threshold: float = DEFAULT_VAD_THRESHOLD) -> FeatureSequence:
    """Drop frames whose energy (squared L2 norm) is below ``rel_threshold`` x mean energy."""
    if not 0.0 <= rel_threshold < 1.0:
        raise ArgumentError(f"rel_threshold must lie in [0, 1), got {rel_threshold}")
    x = seq.frames
    energy = np.sum(x.astype(np.float64) ** 2, axis=1)
    keep = energy >= rel_threshold * energy.mean()
    if not keep.any():
        keep[int(np.argmax(energy))] = True
    return seq.with_frames(x[keep])


def frame_energy(frames: np.ndarray) -> np.ndarray:
    return np.sum(np.asarray(frames, dtype=np.float64) ** 2, axis=1)


def preprocess(seq: FeatureSequence, window_frames: int = DEFAULT_CMN_WINDOW,
               rel_threshold: float = DEFAULT_VAD_THRESHOLD) -> FeatureSequence:
    """Normalize then VAD."""
    return energy_vad(sliding_mean_norm(seq, window_frames), rel_threshold)


def chunk_sample(seq: FeatureSequence, rng: RngStream, min_s: float = 3.0, max_s: float = 8.0,
                 length: int | None = None) -> FeatureSequence:
    """Random contiguous chunk of 3-8 s (300-800 frames by default).

    Sequences no longer than the minimum come back whole.  ``length`` pins the
    chunk length (clipped to the sequence) so a minibatch can share one length;
    the offset is still drawn per call.
    """
    n = seq.n_frames
    lo = int(round(min_s * FRAME_RATE))
    hi = int(round(max_s * FRAME_RATE))
    if length is None:
        if n <= lo:
            return seq
        length = int(rng.integers(lo, hi + 1))
    length = min(int(length), n)
    offset = int(rng.integers(0, n - length + 1))
    return seq.with_frames(seq.frames[offset:offset + length])
