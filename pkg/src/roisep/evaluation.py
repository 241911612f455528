"""Evaluation instruments: SI-SDR improvement, power reduction, the
power-reduction heatmap over a room grid, and the real-time-factor benchmark.
"""

import json
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import cruse, dsp, scenegen
from .roomsim import ArraySpec, RoomSpec, simulate_rir
from .train import si_sdr

CLAMP_DB = 60.0
HEATMAP_SPACING = 0.2
HEATMAP_ROOM_DIMS = (12.0, 12.0, 2.0)
HEATMAP_T60 = 0.5
HEATMAP_UTTERANCE_S = 4.0


def power_reduction_db(y_phi, t_hat, clamp_db=CLAMP_DB):
    """10*log10(||y_phi||^2 / ||t_hat||^2), clamped to +-clamp_db.
    0 dB means pass-through, large values mean suppression."""
    y_phi = np.asarray(y_phi, dtype=np.float64)
    t_hat = np.asarray(t_hat, dtype=np.float64)
    if y_phi.shape != t_hat.shape:
        raise ValueError("signal lengths differ")
    p_mix = float(y_phi @ y_phi)
    if p_mix == 0.0:
        raise ValueError("mixture signal is identically zero")
    p_est = float(t_hat @ t_hat)
    if p_est == 0.0:
        return clamp_db
    return float(np.clip(10.0 * np.log10(p_mix / p_est), -clamp_db, clamp_db))


def delta_si_sdr(est, ref, mixture, clamp_db=CLAMP_DB):
    """SI-SDR improvement of an estimate over the channel-averaged mixture."""
    mixture = np.asarray(mixture)
    mix_phi = dsp.channel_average(mixture) if mixture.ndim == 2 else mixture
    return si_sdr(est, ref, clamp_db) - si_sdr(mix_phi, ref, clamp_db)


# ---------------------------------------------------------------------------
# PR heatmap

@dataclass
class HeatmapGrid:
    origin: tuple          # (x, y) of the first cell, meters
    spacing: float
    nx: int
    ny: int
    values: np.ndarray     # (ny, nx) PR in dB; NaN marks failed cells
    room_dims: tuple
    array_center: tuple


def _heatmap_array(room_dims):
    center = (room_dims[0] / 2.0, room_dims[1] / 2.0, room_dims[2] / 2.0)
    return ArraySpec(center=center, axis=(1.0, 0.0, 0.0), broadside=(0.0, 1.0, 0.0))


def _heatmap_grid_coords(room_dims, array_center):
    margin = 0.1
    xs = np.arange(margin, room_dims[0] - margin + 1e-9, HEATMAP_SPACING)
    y0 = array_center[1] + 0.5
    ys = np.arange(y0, room_dims[1] - margin + 1e-9, HEATMAP_SPACING)
    return np.round(xs, 6), np.round(ys, 6)


_WORKER_CTX = None


def _resolve_separator(spec):
    """Separator specs: ('oracle',), ('unit',) or ('ckpt', path)."""
    if spec[0] == "oracle":
        return ("oracle", None)
    if spec[0] == "unit":
        return ("unit", None)
    if spec[0] == "ckpt":
        config, params = cruse.load_checkpoint(spec[1])
        return ("model", (config, params))
    raise ValueError(f"unknown separator spec {spec!r}")


def _init_heatmap_worker(room, array, utterance, sep_specs):
    global _WORKER_CTX
    _WORKER_CTX = (room, array, utterance,
                   [_resolve_separator(s) for s in sep_specs])


def render_heatmap_point(room, array, utterance, point):
    """Reverberant two-mic capture of a lone source at ``point``."""
    mics = array.mic_positions()
    n = utterance.shape[0]
    mix = np.zeros((2, n), dtype=np.float32)
    for m, mic in enumerate(mics):
        rir = simulate_rir(room, point, mic)
        mix[m] = dsp.fft_convolve(utterance, rir)[:n].astype(np.float32)
    return mix


def heatmap_cell(room, array, utterance, separators, point):
    """PR of each separator for a lone speech source at ``point``; the
    rendered capture is shared across separators."""
    mix = render_heatmap_point(room, array, utterance, point)
    y_phi = dsp.channel_average(mix)
    inside = scenegen.classify_position(array, scenegen.ROI_ANGLE_DEG, point) \
        == scenegen.INSIDE_ROI
    prs = []
    for kind, payload in separators:
        if kind == "oracle":
            t_hat = y_phi if inside else np.zeros_like(y_phi)
        elif kind == "unit":
            t_hat = cruse.apply_mask(
                np.ones((dsp.num_frames(y_phi.shape[0]), dsp.FREQ_BINS),
                        dtype=np.complex64), mix)
        else:
            config, params = payload
            t_hat = cruse.separate(config, params, mix)
        prs.append(power_reduction_db(y_phi, t_hat))
    return prs, inside


def _heatmap_job(args):
    iy, ix, point = args
    room, array, utterance, separators = _WORKER_CTX
    try:
        prs, _ = heatmap_cell(room, array, utterance, separators, point)
    except Exception:
        prs = [float("nan")] * len(separators)
    return iy, ix, prs


def pr_heatmap(separator_spec, room_dims=HEATMAP_ROOM_DIMS, t60=HEATMAP_T60,
               seed=0, workers=1, log_every=0):
    """Power-reduction heatmap: a single synthetic utterance is placed at
    each grid point of the front half-space (0.2 m spacing, >= 0.5 m from the
    array, array centered in the room facing +y) and the separator's PR is
    recorded. Cells where separation fails are NaN.

    ``separator_spec`` is ('oracle',), ('unit',) or ('ckpt', path) -- or a
    list of those, in which case one grid per separator is returned and each
    cell is rendered once.
    """
    single = not isinstance(separator_spec, list)
    specs = [separator_spec] if single else separator_spec
    room = RoomSpec.from_t60(room_dims, t60)
    array = _heatmap_array(room_dims)
    xs, ys = _heatmap_grid_coords(room_dims, array.center)
    utterance = scenegen.synth_speech(
        np.random.default_rng(scenegen.splitmix64(seed)), HEATMAP_UTTERANCE_S
    ).astype(np.float64)

    z = array.center[2]
    jobs = []
    values = [np.full((ys.size, xs.size), np.nan) for _ in specs]
    for iy, y in enumerate(ys):
        for ix, x in enumerate(xs):
            point = (float(x), float(y), z)
            if np.hypot(x - array.center[0], y - array.center[1]) < 0.5:
                continue
            jobs.append((iy, ix, point))

    def store(done, iy, ix, prs):
        for vals, pr in zip(values, prs):
            vals[iy, ix] = pr
        if log_every and (done + 1) % log_every == 0:
            print(f"heatmap: {done + 1}/{len(jobs)} cells")

    if workers > 1:
        with ProcessPoolExecutor(
                max_workers=workers, initializer=_init_heatmap_worker,
                initargs=(room, array, utterance, specs)) as pool:
            for done, (iy, ix, prs) in enumerate(pool.map(_heatmap_job, jobs, chunksize=8)):
                store(done, iy, ix, prs)
    else:
        separators = [_resolve_separator(s) for s in specs]
        for done, (iy, ix, point) in enumerate(jobs):
            try:
                prs, _ = heatmap_cell(room, array, utterance, separators, point)
            except Exception:
                prs = [float("nan")] * len(separators)
            store(done, iy, ix, prs)

    grids = [HeatmapGrid(origin=(float(xs[0]), float(ys[0])), spacing=HEATMAP_SPACING,
                         nx=xs.size, ny=ys.size, values=vals,
                         room_dims=tuple(room_dims), array_center=array.center)
             for vals in values]
    return grids[0] if single else grids


def heatmap_inside_mask(grid):
    """Boolean (ny, nx) mask of cells whose center lies inside the ROI."""
    array = _heatmap_array(grid.room_dims)
    mask = np.zeros((grid.ny, grid.nx), dtype=bool)
    for iy in range(grid.ny):
        for ix in range(grid.nx):
            point = (grid.origin[0] + ix * grid.spacing,
                     grid.origin[1] + iy * grid.spacing, grid.array_center[2])
            mask[iy, ix] = scenegen.classify_position(
                array, scenegen.ROI_ANGLE_DEG, point) == scenegen.INSIDE_ROI
    return mask


def write_heatmap_csv(grid, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("x_m,y_m,pr_db\n")
        for iy in range(grid.ny):
            for ix in range(grid.nx):
                x = grid.origin[0] + ix * grid.spacing
                y = grid.origin[1] + iy * grid.spacing
                fh.write(f"{x:.1f},{y:.1f},{grid.values[iy, ix]:.4f}\n")


def write_heatmap_pgm(grid, path, white_db=20.0):
    """8-bit PGM: 0 dB maps to black, >= white_db to white; NaN to black."""
    vals = np.nan_to_num(grid.values, nan=0.0)
    pix = np.clip(vals / white_db, 0.0, 1.0) * 255.0
    pix = pix.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{grid.nx} {grid.ny}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


# ---------------------------------------------------------------------------
# real-time-factor benchmark

@dataclass
class BenchReport:
    model: str
    mean_seconds_per_file: float
    rtf: float
    file_count: int
    file_duration_s: float
    host: str
    backend: str

    def to_dict(self):
        return dict(self.__dict__)


def _host_description():
    cpu = platform.processor() or platform.machine()
    return f"{platform.system()} {platform.release()}, {cpu}, {os.cpu_count()} cores"


def bench_rtf(config, params, n_files=100, dur_s=10.0, seed=0, model_name=None):
    """Streaming end-to-end (STFT -> network -> iSTFT) timing over random
    stereo clips; RTF = mean processing time / clip duration."""
    from . import backend

    n = int(round(dur_s * dsp.SAMPLE_RATE))
    times = []
    for i in range(n_files):
        rng = np.random.default_rng(scenegen.splitmix64(seed ^ (i + 1)))
        clip = rng.uniform(-0.5, 0.5, (2, n)).astype(np.float32)
        t0 = time.perf_counter()
        cruse.separate_streaming(config, params, clip)
        times.append(time.perf_counter() - t0)
    mean_t = float(np.mean(times))
    if model_name is None:
        matches = [k for k, v in cruse.PRESETS.items() if tuple(v) == config.enc_filters]
        model_name = matches[0] if matches else "custom"
    return BenchReport(model=model_name, mean_seconds_per_file=mean_t,
                       rtf=mean_t / dur_s, file_count=n_files,
                       file_duration_s=dur_s, host=_host_description(),
                       backend=backend.active())


def write_bench_report(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
