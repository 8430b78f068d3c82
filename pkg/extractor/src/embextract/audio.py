"""WAV loading with the strict input contract of the SSL encoders: 16 kHz mono."""

from __future__ import annotations

import numpy as np
import scipy.io.wavfile

REQUIRED_RATE = 16000


class AudioError(Exception):
    """Audio file violates the 16 kHz mono input contract."""


def load_wav(path, utterance_id: str) -> np.ndarray:
    """Float32 waveform in [-1, 1]; rejects wrong rate or channel count."""
    rate, data = scipy.io.wavfile.read(path)
    if rate != REQUIRED_RATE:
        raise AudioError(
            f"utterance {utterance_id!r}: sample rate {rate} Hz, need {REQUIRED_RATE} Hz ({path})"
        )
    if data.ndim != 1:
        raise AudioError(
            f"utterance {utterance_id!r}: {data.shape[1]} channels, need mono ({path})"
        )
    if data.dtype == np.int16:
        return (data / 32768.0).astype(np.float32)
    if data.dtype == np.int32:
        return (data / 2147483648.0).astype(np.float32)
    if data.dtype in (np.float32, np.float64):
        return data.astype(np.float32)
    if data.dtype == np.uint8:
        return ((data.astype(np.float32) - 128.0) / 128.0).astype(np.float32)
    raise AudioError(f"utterance {utterance_id!r}: unsupported sample format {data.dtype}")
