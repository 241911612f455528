"""WAV read/write at the pipeline's fixed 16 kHz rate (float32 on disk,
PCM16 accepted on read). Exposed on the command line via the cli module."""

import numpy as np
import scipy.io.wavfile

from .dsp import SAMPLE_RATE


def write_wav(path, data, sample_rate=SAMPLE_RATE):
    """Write a (N,) mono or (C, N) multichannel float32 WAV."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        arr = np.ascontiguousarray(arr.T)
    elif arr.ndim != 1:
        raise ValueError("expected (N,) or (channels, N) audio")
    scipy.io.wavfile.write(path, sample_rate, arr)


def read_wav(path):
    """Read a WAV file as a (channels, N) float32 array. Only 16 kHz PCM16 or
    float32 content is accepted; PCM16 is normalized by 32768."""
    rate, data = scipy.io.wavfile.read(path)
    if rate != SAMPLE_RATE:
        raise ValueError(f"unsupported sample rate {rate} Hz: expected {SAMPLE_RATE} Hz")
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        pass
    else:
        raise ValueError(f"unsupported WAV sample format {data.dtype}: expected PCM16 or float32")
    if data.ndim == 1:
        data = data[:, None]
    return np.ascontiguousarray(data.T)
