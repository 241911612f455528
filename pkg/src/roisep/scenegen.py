"""Scene sampling, rendering and dataset generation.

Samples shoebox rooms with a randomly posed two-mic array, places target
speakers inside the angular region of interest and interferers outside it
(never in the mirrored region behind the array), renders reverberant stems
through image-source RIRs, mixes at sampled SIR/SNR, level-normalizes, and
emits WAV stems plus a JSON-Lines manifest sufficient for bit-exact
regeneration. Includes a synthetic speech/noise generator so datasets can be
built without any external corpus.
"""

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.fft
import scipy.signal

from . import dsp, wavio
from .roomsim import ArraySpec, RoomSpec, simulate_rir

INSIDE_ROI = "inside_roi"
OUTSIDE = "outside"
MIRROR_FORBIDDEN = "mirror_forbidden"

ROI_ANGLE_DEG = 60.0
ARRAY_WALL_MARGIN = 2.0
SOURCE_WALL_MARGIN = 0.1
SOURCE_ARRAY_MARGIN = 0.5
MAX_REJECTION_ATTEMPTS = 10000

_U64 = 0xFFFFFFFFFFFFFFFF


def splitmix64(x):
    """SplitMix64 mix function; derives independent per-clip seeds."""
    x = (x + 0x9E3779B97F4A7C15) & _U64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _U64
    return (x ^ (x >> 31)) & _U64


# ---------------------------------------------------------------------------
# geometry

def source_angle_deg(array, pos):
    """Unsigned angle between the array broadside and the horizontal
    projection of pos - center: 0 = straight ahead, 90 = along the array
    axis, >90 = behind."""
    v = np.asarray(pos, dtype=np.float64) - np.asarray(array.center)
    along = float(v[0] * array.axis[0] + v[1] * array.axis[1])
    front = float(v[0] * array.broadside[0] + v[1] * array.broadside[1])
    norm = np.hypot(along, front)
    if norm < 1e-12:
        raise ValueError("source position coincides with the array center")
    return float(np.degrees(np.arccos(np.clip(front / norm, -1.0, 1.0))))


def classify_position(array, roi_angle_deg, pos):
    """Region label for a position: inside the ROI cone, in the mirrored
    (front-back ambiguous) cone behind the array, or plain outside."""
    half = roi_angle_deg / 2.0
    angle = source_angle_deg(array, pos)
    if angle <= half:
        return INSIDE_ROI
    if 180.0 - angle <= half:
        return MIRROR_FORBIDDEN
    return OUTSIDE


# ---------------------------------------------------------------------------
# scene sampling

@dataclass
class SceneSpec:
    room: RoomSpec
    array: ArraySpec
    targets: list
    interferers: list
    noise_pos: tuple
    sir_db: float
    snr_db: float
    level_dbfs: float
    seed: int
    roi_angle_deg: float = ROI_ANGLE_DEG


def _sample_position(rng, room, array, want, roi_angle_deg):
    lx, ly, lz = room.dims
    center = np.asarray(array.center)
    for _ in range(MAX_REJECTION_ATTEMPTS):
        pos = (rng.uniform(SOURCE_WALL_MARGIN, lx - SOURCE_WALL_MARGIN),
               rng.uniform(SOURCE_WALL_MARGIN, ly - SOURCE_WALL_MARGIN),
               lz / 2.0)
        if np.linalg.norm(np.asarray(pos) - center) < SOURCE_ARRAY_MARGIN:
            continue
        if want is None:
            return pos
        if classify_position(array, roi_angle_deg, pos) == want:
            return pos
    raise RuntimeError("rejection sampling exceeded 10000 attempts (degenerate geometry)")


def sample_scene(rng, mode="simple", overrides=None):
    """Draw one scene: room dims in [4,8]x[4,8]x[2,4] m, T60 in [0.25,0.7] s,
    array >= 2 m from the lateral walls at half room height with a uniform
    yaw; 'simple' places 1 target + 1 interferer, 'complex' draws 1-4 of
    each. SIR ~ U[0,10] dB, SNR ~ N(7,3) dB, level ~ N(-28,10) dBFS."""
    ov = dict(overrides or {})
    dims = (rng.uniform(4.0, 8.0), rng.uniform(4.0, 8.0), rng.uniform(2.0, 4.0))
    room = RoomSpec.from_t60(dims, rng.uniform(0.25, 0.7))
    center = (rng.uniform(ARRAY_WALL_MARGIN, dims[0] - ARRAY_WALL_MARGIN),
              rng.uniform(ARRAY_WALL_MARGIN, dims[1] - ARRAY_WALL_MARGIN),
              dims[2] / 2.0)
    array = ArraySpec.from_yaw(center, rng.uniform(0.0, 2.0 * np.pi))

    if mode == "simple":
        n_targets, n_interferers = 1, 1
    elif mode == "complex":
        n_targets = int(rng.integers(1, 5))
        n_interferers = int(rng.integers(1, 5))
    else:
        raise ValueError(f"unknown scene mode {mode!r}")
    if "target_range" in ov:
        lo, hi = ov["target_range"]
        n_targets = int(rng.integers(lo, hi + 1))
    if "interferer_range" in ov:
        lo, hi = ov["interferer_range"]
        n_interferers = int(rng.integers(lo, hi + 1))

    roi = ov.get("roi_angle_deg", ROI_ANGLE_DEG)
    targets = [_sample_position(rng, room, array, INSIDE_ROI, roi)
               for _ in range(n_targets)]
    interferers = [_sample_position(rng, room, array, OUTSIDE, roi)
                   for _ in range(n_interferers)]

    with_noise = ov.get("noise", True)
    noise_pos = _sample_position(rng, room, array, None, roi) if with_noise else None

    if "sir_choices" in ov:
        sir_db = float(rng.choice(np.asarray(ov["sir_choices"], dtype=np.float64)))
    elif "sir_fixed" in ov:
        sir_db = float(ov["sir_fixed"])
    else:
        sir_db = float(rng.uniform(0.0, 10.0))
    snr_db = float(rng.normal(7.0, 3.0)) if with_noise else None
    level_dbfs = float(rng.normal(-28.0, 10.0))

    return SceneSpec(room=room, array=array, targets=targets,
                     interferers=interferers, noise_pos=noise_pos,
                     sir_db=sir_db, snr_db=snr_db, level_dbfs=level_dbfs,
                     seed=0, roi_angle_deg=roi)


# ---------------------------------------------------------------------------
# rendering

@dataclass
class MixtureClip:
    """Per-microphone stems and their sum; all stems share one scale so the
    mixture identity y = t + k + n holds exactly per sample."""

    t: np.ndarray
    k: np.ndarray
    n: np.ndarray
    y: np.ndarray
    t_phi: np.ndarray = field(init=False)
    y_phi: np.ndarray = field(init=False)
    achieved_level_dbfs: float = 0.0
    peak_clamped: bool = False

    def __post_init__(self):
        self.t_phi = dsp.channel_average(self.t)
        self.y_phi = dsp.channel_average(self.y)


def _reverberate(room, pos, mics, dry, n_samples):
    out = np.zeros((len(mics), n_samples))
    for m, mic in enumerate(mics):
        rir = simulate_rir(room, pos, mic)
        out[m] = dsp.fft_convolve(dry, rir)[:n_samples]
    return out


def _fit_length(sig, n_samples):
    sig = np.asarray(sig, dtype=np.float64)
    if sig.shape[0] >= n_samples:
        return sig[:n_samples]
    out = np.zeros(n_samples)
    out[: sig.shape[0]] = sig
    return out


def render_scene(scene, dry_targets, dry_interferers, dry_noise=None,
                 n_samples=None):
    """Render a scene into a MixtureClip.

    Each dry source is convolved with its two RIRs; the interferer block is
    scaled to hit the scene SIR against the channel-averaged target, noise is
    scaled to the SNR against the speech mix, then one common gain sets the
    channel-averaged mixture RMS to the scene level (with a peak clamp to
    0.99 full scale when needed, flagged on the clip).
    """
    if len(dry_targets) != len(scene.targets):
        raise ValueError("one dry signal per target source required")
    if len(dry_interferers) != len(scene.interferers):
        raise ValueError("one dry signal per interferer source required")
    if scene.noise_pos is not None and dry_noise is None:
        raise ValueError("scene has a noise source but no dry noise signal")
    if n_samples is None:
        n_samples = max(len(s) for s in list(dry_targets) + list(dry_interferers))
    mics = scene.array.mic_positions()

    t_sum = np.zeros((2, n_samples))
    for pos, sig in zip(scene.targets, dry_targets):
        t_sum += _reverberate(scene.room, pos, mics, _fit_length(sig, n_samples), n_samples)
    k_sum = np.zeros((2, n_samples))
    for pos, sig in zip(scene.interferers, dry_interferers):
        k_sum += _reverberate(scene.room, pos, mics, _fit_length(sig, n_samples), n_samples)
    n_sum = np.zeros((2, n_samples))
    if scene.noise_pos is not None:
        n_sum = _reverberate(scene.room, scene.noise_pos, mics,
                             _fit_length(dry_noise, n_samples), n_samples)

    t_phi = t_sum.mean(axis=0)
    k_phi = k_sum.mean(axis=0)
    p_t = float(t_phi @ t_phi)
    p_k = float(k_phi @ k_phi)
    if p_t == 0.0:
        raise ValueError("silent target: cannot satisfy the SIR constraint")
    if p_k == 0.0:
        raise ValueError("silent interference: cannot satisfy the SIR constraint")
    g_k = np.sqrt(p_t / (p_k * 10.0 ** (scene.sir_db / 10.0)))

    g_n = 0.0
    if scene.noise_pos is not None:
        speech_phi = t_phi + g_k * k_phi
        n_phi = n_sum.mean(axis=0)
        p_n = float(n_phi @ n_phi)
        if p_n == 0.0:
            raise ValueError("silent noise: cannot satisfy the SNR constraint")
        g_n = np.sqrt(float(speech_phi @ speech_phi)
                      / (p_n * 10.0 ** (scene.snr_db / 10.0)))

    y = t_sum + g_k * k_sum + g_n * n_sum
    y_phi = y.mean(axis=0)
    rms = np.sqrt(float(y_phi @ y_phi) / n_samples)
    if rms == 0.0:
        raise ValueError("silent mixture")
    g_lvl = 10.0 ** (scene.level_dbfs / 20.0) / rms
    peak = float(np.abs(y).max())
    clamped = peak * g_lvl > 0.99
    if clamped:
        g_lvl = 0.99 / peak
    achieved = 20.0 * np.log10(rms * g_lvl)

    t32 = (t_sum * g_lvl).astype(np.float32)
    k32 = (k_sum * (g_k * g_lvl)).astype(np.float32)
    n32 = (n_sum * (g_n * g_lvl)).astype(np.float32)
    return MixtureClip(t=t32, k=k32, n=n32, y=t32 + k32 + n32,
                       achieved_level_dbfs=float(achieved), peak_clamped=bool(clamped))


# ---------------------------------------------------------------------------
# synthetic sources

def synth_speech(rng, duration_s):
    """Speech-like test signal: a glottal pulse train with drifting pitch
    (80-300 Hz), shaped by three slowly moving formant resonators, gated into
    syllable bursts separated by true silence; peak 0.85."""
    n = int(round(duration_s * dsp.SAMPLE_RATE))
    if n <= 0:
        raise ValueError("duration must be positive")
    fs = dsp.SAMPLE_RATE

    # pitch contour: log-domain random walk, control point every 100 ms
    n_ctrl = max(n // (fs // 10) + 2, 4)
    logf = np.empty(n_ctrl)
    logf[0] = rng.uniform(np.log(90.0), np.log(260.0))
    for i in range(1, n_ctrl):
        logf[i] = np.clip(logf[i - 1] + rng.normal(0.0, 0.08),
                          np.log(80.0), np.log(300.0))
    f0 = np.interp(np.arange(n), np.linspace(0, n - 1, n_ctrl), np.exp(logf))

    phase = np.cumsum(f0) / fs
    marks = np.nonzero(np.diff(np.floor(phase)) > 0)[0] + 1
    excitation = np.zeros(n)
    excitation[marks] = rng.uniform(0.8, 1.2, marks.shape[0])
    excitation += 0.02 * rng.standard_normal(n)
    # glottal spectral roll-off
    excitation = scipy.signal.lfilter([1.0], [1.0, -0.92], excitation)
    excitation = scipy.signal.lfilter([1.0], [1.0, -0.92], excitation)

    # three formant resonators with slowly drifting centers
    centers = np.array([rng.uniform(300.0, 800.0),
                        rng.uniform(900.0, 1800.0),
                        rng.uniform(2000.0, 3200.0)])
    bws = np.array([80.0, 120.0, 180.0])
    block = 320
    n_blocks = -(-n // block)
    drift = rng.normal(0.0, 0.01, (n_blocks, 3))
    voiced = np.zeros(n)
    zi = [np.zeros(2) for _ in range(3)]
    cur = centers.copy()
    for bi in range(n_blocks):
        lo, hi = bi * block, min((bi + 1) * block, n)
        cur = np.clip(cur * np.exp(drift[bi]), centers * 0.7, centers * 1.4)
        seg = excitation[lo:hi]
        acc = np.zeros(hi - lo)
        for fi in range(3):
            r = np.exp(-np.pi * bws[fi] / fs)
            a = [1.0, -2.0 * r * np.cos(2.0 * np.pi * cur[fi] / fs), r * r]
            b = [1.0 - r]
            out, zi[fi] = scipy.signal.lfilter(b, a, seg, zi=zi[fi])
            acc += out
        voiced[lo:hi] = acc

    # syllable gating with raised-cosine edges and exact-zero pauses
    envelope = np.zeros(n)
    ramp = int(0.02 * fs)
    edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
    pos = 0
    while pos < n:
        burst = int(rng.uniform(0.15, 0.45) * fs)
        gap = int(rng.uniform(0.05, 0.20) * fs)
        amp = rng.uniform(0.5, 1.0)
        hi = min(pos + burst, n)
        seg = np.full(hi - pos, amp)
        m = min(ramp, seg.shape[0])
        seg[:m] *= edge[:m]
        seg[-m:] *= edge[:m][::-1]
        envelope[pos:hi] = seg
        pos = hi + gap

    sig = voiced * envelope
    peak = np.abs(sig).max()
    if peak > 0:
        sig *= 0.85 / peak
    return sig.astype(np.float32)


def synth_noise(rng, duration_s):
    """Pink-ish background noise with slow amplitude modulation."""
    n = int(round(duration_s * dsp.SAMPLE_RATE))
    white = rng.standard_normal(n)
    spec = scipy.fft.rfft(white)
    freqs = np.arange(spec.shape[0], dtype=np.float64)
    freqs[0] = 1.0
    spec /= np.sqrt(freqs)
    noise = scipy.fft.irfft(spec, n)
    mod_hz = rng.uniform(0.2, 0.5)
    t = np.arange(n) / dsp.SAMPLE_RATE
    mod = 1.0 + 0.3 * np.sin(2.0 * np.pi * mod_hz * t + rng.uniform(0, 2 * np.pi))
    noise *= mod
    noise /= np.sqrt(np.mean(noise**2))
    return (0.05 * noise).astype(np.float32)


# ---------------------------------------------------------------------------
# dataset generation

SCENARIOS = {
    "1": {"mode": "simple"},
    "2": {"mode": "complex", "target_range": (2, 4), "interferer_range": (1, 4)},
    "3": {"mode": "simple", "noise": False, "sir_choices": (0.0, 5.0, 10.0)},
    "4": {"mode": "complex", "target_range": (2, 4), "interferer_range": (1, 4),
          "noise": False, "sir_choices": (0.0, 5.0, 10.0)},
    "train-simple": {"mode": "simple"},
    "train-complex": {"mode": "complex"},
}


def scenario_overrides(name, noise=None, sir=None):
    """Generation settings for a named test/train scenario; ``noise``
    toggles the noise source where the scenario leaves it open and ``sir``
    pins a fixed SIR."""
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r} (choose from {sorted(SCENARIOS)})")
    ov = dict(SCENARIOS[name])
    mode = ov.pop("mode")
    if noise is not None:
        if name in ("3", "4") and noise:
            raise ValueError(f"scenario {name} is defined without noise")
        ov["noise"] = noise
    if sir is not None:
        if "sir_choices" in ov:
            if float(sir) not in [float(s) for s in ov["sir_choices"]]:
                raise ValueError(f"scenario {name} uses SIRs {ov['sir_choices']}")
            ov.pop("sir_choices")
        ov["sir_fixed"] = float(sir)
    return mode, ov


def _corpus_files(corpus_dir):
    files = sorted(f for f in os.listdir(corpus_dir) if f.lower().endswith(".wav"))
    if not files:
        raise ValueError(f"no WAV files found in corpus directory {corpus_dir}")
    return [os.path.join(corpus_dir, f) for f in files]


def _dry_from_corpus(rng, files, count, n_samples):
    if count > len(files):
        raise ValueError(f"corpus exhausted: need {count} distinct utterances, "
                         f"have {len(files)}")
    picks = rng.choice(len(files), size=count, replace=False)
    out = []
    for idx in picks:
        audio = wavio.read_wav(files[idx]).mean(axis=0)
        if audio.shape[0] > n_samples:
            start = int(rng.integers(0, audio.shape[0] - n_samples + 1))
            audio = audio[start : start + n_samples]
        out.append(_fit_length(audio, n_samples).astype(np.float32))
    return out


def build_clip(master_seed, index, mode, overrides, duration_s, corpus_dir=None):
    """Deterministically build clip ``index``: per-clip seed is
    splitmix64(master_seed XOR index), so generation order and worker count
    never change the result."""
    seed = splitmix64((master_seed ^ index) & _U64)
    rng = np.random.default_rng(seed)
    scene = sample_scene(rng, mode, overrides)
    scene.seed = seed
    n_samples = int(round(duration_s * dsp.SAMPLE_RATE))
    n_speech = len(scene.targets) + len(scene.interferers)
    if corpus_dir is not None:
        dry = _dry_from_corpus(rng, _corpus_files(corpus_dir), n_speech, n_samples)
    else:
        dry = [synth_speech(rng, duration_s) for _ in range(n_speech)]
    dry_noise = synth_noise(rng, duration_s) if scene.noise_pos is not None else None
    clip = render_scene(scene, dry[: len(scene.targets)],
                        dry[len(scene.targets) :], dry_noise, n_samples)
    return scene, clip


def _describe_sources(scene, positions):
    out = []
    for pos in positions:
        out.append({
            "pos": [float(p) for p in pos],
            "angle_deg": source_angle_deg(scene.array, pos),
            "classification": classify_position(scene.array, scene.roi_angle_deg, pos),
        })
    return out


def _emit_clip(args):
    (out_dir, master_seed, index, mode, overrides, duration_s, corpus_dir) = args
    scene, clip = build_clip(master_seed, index, mode, overrides, duration_s,
                             corpus_dir)
    stem = f"clip_{index:05d}"
    paths = {}
    for tag, data in (("y", clip.y), ("t", clip.t), ("k", clip.k)):
        paths[tag] = f"{stem}_{tag}.wav"
        wavio.write_wav(os.path.join(out_dir, paths[tag]), data)
    if scene.noise_pos is not None:
        paths["n"] = f"{stem}_n.wav"
        wavio.write_wav(os.path.join(out_dir, paths["n"]), clip.n)
    else:
        paths["n"] = None
    return {
        "id": stem,
        "index": index,
        "seed": int(scene.seed),
        "master_seed": int(master_seed),
        "paths": paths,
        "room_dims": [float(d) for d in scene.room.dims],
        "t60": float(scene.room.t60),
        "array": {"center": list(scene.array.center), "axis": list(scene.array.axis),
                  "broadside": list(scene.array.broadside),
                  "spacing": scene.array.spacing},
        "roi_angle_deg": scene.roi_angle_deg,
        "targets": _describe_sources(scene, scene.targets),
        "interferers": _describe_sources(scene, scene.interferers),
        "noise_pos": None if scene.noise_pos is None else [float(p) for p in scene.noise_pos],
        "sir_db": scene.sir_db,
        "snr_db": scene.snr_db,
        "level_dbfs": scene.level_dbfs,
        "achieved_level_dbfs": clip.achieved_level_dbfs,
        "peak_clamped": clip.peak_clamped,
        "duration_s": duration_s,
        "gen": {"mode": mode, "overrides": {k: list(v) if isinstance(v, tuple) else v
                                            for k, v in overrides.items()},
                "corpus": corpus_dir is not None},
    }


def generate_dataset(out_dir, count, master_seed, mode="simple", overrides=None,
                     duration_s=10.0, corpus_dir=None, workers=1):
    """Generate ``count`` clips plus a manifest.jsonl. Outputs are identical
    for any worker count."""
    os.makedirs(out_dir, exist_ok=True)
    overrides = dict(overrides or {})
    jobs = [(out_dir, master_seed, i, mode, overrides, duration_s, corpus_dir)
            for i in range(count)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_emit_clip, jobs))
    else:
        records = [_emit_clip(job) for job in jobs]
    records.sort(key=lambda r: r["index"])
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest_path


def load_manifest(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_clip_pair(record, base_dir):
    """(stereo mixture, channel-averaged target) for one manifest record."""
    mix = wavio.read_wav(os.path.join(base_dir, record["paths"]["y"]))
    target = wavio.read_wav(os.path.join(base_dir, record["paths"]["t"]))
    return mix, dsp.channel_average(target)


def load_training_set(manifest_path):
    base = os.path.dirname(os.path.abspath(manifest_path))
    return [load_clip_pair(rec, base) for rec in load_manifest(manifest_path)]
