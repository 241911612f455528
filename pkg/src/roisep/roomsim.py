"""Shoebox room acoustics: Sabine absorption, image-source RIRs and a
Schroeder-decay reverberation-time estimator used to validate them."""

from dataclasses import dataclass

import numpy as np

from . import backend
from .backend.python import KERNEL_TAPS
from .dsp import SAMPLE_RATE

SPEED_OF_SOUND = 343.0
MAX_REFLECTION_ORDER = 40


def absorption_from_t60(dims, t60):
    """Uniform Sabine absorption coefficient achieving the target T60 in a
    shoebox room: 0.161 * V / (S * T60)."""
    if t60 <= 0:
        raise ValueError("t60 must be positive")
    lx, ly, lz = dims
    volume = lx * ly * lz
    surface = 2.0 * (lx * ly + lx * lz + ly * lz)
    absorption = 0.161 * volume / (surface * t60)
    if absorption > 1.0:
        raise ValueError(
            f"room too small / T60 too short: Sabine absorption {absorption:.3f} > 1"
        )
    return absorption


@dataclass(frozen=True)
class RoomSpec:
    """Shoebox room with uniform wall absorption."""

    dims: tuple
    t60: float
    absorption: float
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        if any(d <= 0 for d in self.dims):
            raise ValueError("room dimensions must be positive")
        if not 0.0 < self.absorption <= 1.0:
            raise ValueError("absorption must be in (0, 1]")

    @classmethod
    def from_t60(cls, dims, t60):
        return cls(dims=tuple(float(d) for d in dims), t60=float(t60),
                   absorption=absorption_from_t60(dims, t60))

    @classmethod
    def anechoic(cls, dims):
        return cls(dims=tuple(float(d) for d in dims), t60=0.0, absorption=1.0)

    def contains(self, pos, margin=0.0):
        return all(margin < p < d - margin for p, d in zip(pos, self.dims))


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("zero-length direction vector")
    return v / n


@dataclass(frozen=True)
class ArraySpec:
    """Two-microphone linear array. ``axis`` points along the mic pair,
    ``broadside`` is the horizontal normal designating the front."""

    center: tuple
    axis: tuple
    broadside: tuple
    spacing: float = 0.08
    mic_count: int = 2

    def __post_init__(self):
        ax = _unit(self.axis)
        bs = _unit(self.broadside)
        if abs(ax[2]) > 1e-9 or abs(bs[2]) > 1e-9:
            raise ValueError("array axis and broadside must be horizontal")
        if abs(float(np.dot(ax, bs))) > 1e-9:
            raise ValueError("broadside must be perpendicular to the array axis")
        object.__setattr__(self, "axis", tuple(ax))
        object.__setattr__(self, "broadside", tuple(bs))
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @classmethod
    def from_yaw(cls, center, yaw_rad, spacing=0.08):
        """Array whose axis makes angle ``yaw_rad`` with +x; broadside is the
        axis rotated +90 degrees."""
        axis = (np.cos(yaw_rad), np.sin(yaw_rad), 0.0)
        broadside = (-np.sin(yaw_rad), np.cos(yaw_rad), 0.0)
        return cls(center=tuple(center), axis=axis, broadside=broadside, spacing=spacing)

    def mic_positions(self):
        c = np.asarray(self.center)
        ax = np.asarray(self.axis)
        half = 0.5 * self.spacing
        return [tuple(c - half * ax), tuple(c + half * ax)]


def default_max_order(room):
    """Reflection order reaching arrivals out to roughly one T60:
    ceil(c * t60 / (2 * min dim)) + 1, capped at 40."""
    if room.absorption >= 1.0 or room.t60 <= 0:
        return 1
    order = int(np.ceil(room.speed_of_sound * room.t60 / (2.0 * min(room.dims)))) + 1
    return min(order, MAX_REFLECTION_ORDER)


def simulate_rir(room, src, mic, max_order=None):
    """Image-source room impulse response from ``src`` to ``mic``.

    Image index m in Z^3 counts wall reflections per axis (|m| hits); the
    image coordinate along an axis of length L is m*L + s for even m and
    (m+1)*L - s for odd m. Each arrival contributes beta^hits / d through an
    81-tap windowed-sinc fractional-delay kernel (unit gain at 1 m).
    Returns float64 taps at 16 kHz.
    """
    src = np.asarray(src, dtype=np.float64)
    mic = np.asarray(mic, dtype=np.float64)
    if not room.contains(src) or not room.contains(mic):
        raise ValueError("source and microphone must be strictly inside the room")
    if np.allclose(src, mic):
        raise ValueError("source and microphone positions coincide")
    if max_order is None:
        max_order = default_max_order(room)

    rng_m = np.arange(-max_order, max_order + 1)
    mx, my, mz = np.meshgrid(rng_m, rng_m, rng_m, indexing="ij")
    hits = np.abs(mx) + np.abs(my) + np.abs(mz)
    keep = hits <= max_order
    m = np.stack([mx[keep], my[keep], mz[keep]], axis=1)
    hits = hits[keep]

    dims = np.asarray(room.dims)
    even = m % 2 == 0
    images = np.where(even, m * dims + src, (m + 1) * dims - src)
    dist = np.linalg.norm(images - mic, axis=1)
    beta = np.sqrt(1.0 - room.absorption)
    amps = beta**hits / dist
    strong = amps > 1e-12
    amps = amps[strong]
    if amps.size == 0:
        raise ValueError("no audible image sources (check absorption/order)")
    delays = dist[strong] / room.speed_of_sound * SAMPLE_RATE

    out_len = int(np.ceil(delays.max())) + KERNEL_TAPS // 2 + 1
    return backend.ism_scatter(delays, amps, out_len)


def estimate_t60_schroeder(rir, sample_rate=SAMPLE_RATE):
    """T60 from the backward-integrated energy decay curve, extrapolated from
    a linear fit between -5 dB and -25 dB (T20 method, x3)."""
    rir = np.asarray(rir, dtype=np.float64)
    if rir.shape[0] < sample_rate // 2:
        raise ValueError("RIR too short: need at least 0.5 s of taps")
    energy = rir * rir
    edc = np.cumsum(energy[::-1])[::-1]
    total = edc[0]
    if total <= 0:
        raise ValueError("decay range not reached: silent RIR")
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(edc / total)

    below5 = np.nonzero(db <= -5.0)[0]
    below25 = np.nonzero(db <= -25.0)[0]
    if below5.size == 0 or below25.size == 0:
        raise ValueError("decay range not reached: EDC never hits -25 dB")
    i5, i25 = below5[0], below25[0]
    min_span = int(0.002 * sample_rate)
    if i25 - i5 < min_span or i25 >= rir.shape[0] - 1:
        raise ValueError("decay range not reached: decay span degenerate")

    t = np.arange(i5, i25 + 1) / sample_rate
    seg = db[i5 : i25 + 1]
    slope, _ = np.polyfit(t, seg, 1)
    if slope >= 0:
        raise ValueError("decay range not reached: non-decaying EDC")
    return -60.0 / slope
