"""Framed STFT/iSTFT and convolution kernels for the 16 kHz pipeline.

Fixed analysis setup: 20 ms square-root periodic-Hann window (320 samples),
10 ms hop (160), NFFT 320, one-sided spectra with 161 bins. Signals are
framed with a 160-sample leading zero pad plus a tail pad completing the
last frame, so every original sample sits where the squared windows sum to
one and the round trip is exact up to float error.
"""

from functools import lru_cache

import numpy as np
import scipy.fft

SAMPLE_RATE = 16000
WIN_LEN = 320
HOP = 160
NFFT = 320
FREQ_BINS = NFFT // 2 + 1


@lru_cache(maxsize=4)
def sqrt_hann_window(dtype=np.float32):
    """Square root of the periodic (DFT-symmetric) Hann window of length 320."""
    n = np.arange(WIN_LEN)
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / WIN_LEN)
    win = np.sqrt(hann).astype(np.dtype(dtype))
    win.flags.writeable = False
    return win


def num_frames(n_samples):
    """Frame count for an n-sample signal: ceil(N/160) + 1."""
    return -(-n_samples // HOP) + 1


def _check_signal(x):
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("empty input signal")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite samples")
    return x


def stft(x):
    """One-sided STFT, shape (T, 161). Dtype follows the input (float32 in,
    complex64 out)."""
    x = _check_signal(x)
    n = x.shape[0]
    t_frames = num_frames(n)
    padded_len = (t_frames - 1) * HOP + WIN_LEN
    padded = np.zeros(padded_len, dtype=x.dtype)
    padded[HOP : HOP + n] = x
    idx = np.arange(WIN_LEN)[None, :] + HOP * np.arange(t_frames)[:, None]
    frames = padded[idx] * sqrt_hann_window(x.dtype)[None, :]
    return scipy.fft.rfft(frames, n=NFFT, axis=1)


def istft(spec, out_len):
    """Inverse of :func:`stft` with the same square-root Hann synthesis
    window; overlap-add, then removal of the 160-sample front pad and
    truncation to ``out_len`` samples."""
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[1] != FREQ_BINS:
        raise ValueError(f"spectrogram must be (T, {FREQ_BINS})")
    t_frames = spec.shape[0]
    frames = scipy.fft.irfft(spec, n=NFFT, axis=1)
    win = sqrt_hann_window(frames.dtype)
    frames = frames * win[None, :]
    total = (t_frames - 1) * HOP + WIN_LEN
    if out_len > total - HOP:
        raise ValueError(
            f"out_len {out_len} exceeds synthesizable length {total - HOP}"
        )
    out = np.zeros(total, dtype=frames.dtype)
    for t in range(t_frames):
        out[t * HOP : t * HOP + WIN_LEN] += frames[t]
    return out[HOP : HOP + out_len]


def channel_average(channels):
    """Average across microphone channels: (M, N) -> (N,)."""
    channels = np.asarray(channels)
    if channels.ndim != 2:
        raise ValueError("expected (channels, samples) array")
    return channels.mean(axis=0).astype(channels.dtype, copy=False)


def fft_convolve(x, h):
    """Full linear convolution of x (len N) with h (len L), length N + L - 1."""
    x = np.asarray(x)
    h = np.asarray(h)
    if x.size == 0 or h.size == 0:
        raise ValueError("empty convolution operand")
    n_out = x.shape[0] + h.shape[0] - 1
    nfft = scipy.fft.next_fast_len(n_out, real=True)
    spec = scipy.fft.rfft(x, nfft) * scipy.fft.rfft(h, nfft)
    return scipy.fft.irfft(spec, nfft)[:n_out]
