"""Desk-scale speaker embedding laboratory: LDE pooling, A-softmax, PLDA backend, zero-shot TTS conditioning."""

__version__ = "0.1.0"
