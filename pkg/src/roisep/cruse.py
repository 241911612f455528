"""Stereo-input masking U-Net with a grouped-GRU bottleneck.

Encoder: 4 causal (2,3)-kernel convolutions, frequency stride 2, no
frequency padding (161 -> 80 -> 39 -> 19 -> 9 bins). Bottleneck: per-frame
features split into 4 groups, each driven through its own GRU. Decoder
mirrors the encoder with transposed convolutions and 1x1-conv skip paths,
tanh on the final layer producing a bounded complex mask that is applied to
the channel-averaged mixture spectrogram.

Includes batch and frame-by-frame (streaming) inference, parameter/FLOP
accounting and checkpoint I/O.
"""

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
import scipy.fft

from . import autodiff as ad
from . import backend, dsp

PRELU_SLOPE = 0.25
CHECKPOINT_MAGIC = b"RSEP"
CHECKPOINT_VERSION = 1

PRESETS = {
    "light": (32, 64, 64, 64),
    "heavy": (32, 64, 128, 256),
    "toy": (8, 16, 16, 16),
}


@dataclass(frozen=True)
class CruseConfig:
    enc_filters: tuple = PRESETS["light"]
    in_channels: int = 4
    out_channels: int = 2
    kernel: tuple = (2, 3)
    stride: tuple = (1, 2)
    gru_groups: int = 4
    freq_bins: int = 161

    def __post_init__(self):
        object.__setattr__(self, "enc_filters", tuple(self.enc_filters))
        object.__setattr__(self, "kernel", tuple(self.kernel))
        object.__setattr__(self, "stride", tuple(self.stride))
        if len(self.enc_filters) != 4:
            raise ValueError("expected 4 encoder filter counts")
        if self.kernel != (2, 3) or self.stride != (1, 2):
            raise ValueError("only kernel (2,3) with stride (1,2) is supported")
        if (self.enc_filters[-1] * self.freq_chain()[-1]) % self.gru_groups:
            raise ValueError("bottleneck features not divisible by gru_groups")

    @classmethod
    def preset(cls, name):
        if name not in PRESETS:
            raise ValueError(f"unknown model preset {name!r} (choose from {sorted(PRESETS)})")
        return cls(enc_filters=PRESETS[name])

    def freq_chain(self):
        """Frequency sizes after each encoder layer: [161, 80, 39, 19, 9]."""
        sizes = [self.freq_bins]
        for _ in range(4):
            sizes.append((sizes[-1] - 3) // 2 + 1)
        return sizes

    def group_size(self):
        return self.enc_filters[-1] * self.freq_chain()[-1] // self.gru_groups

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _layer_channels(config):
    """(cin, cout) per encoder layer and per decoder layer (level 4 first)."""
    c = config.enc_filters
    enc = [(config.in_channels, c[0]), (c[0], c[1]), (c[1], c[2]), (c[2], c[3])]
    dec = [(c[3], c[2]), (c[2], c[1]), (c[1], c[0]), (c[0], config.out_channels)]
    return enc, dec


def param_shapes(config):
    """Ordered name -> shape map for all trainable tensors (60 entries)."""
    enc, dec = _layer_channels(config)
    g = config.group_size()
    shapes = {}
    for i, (cin, cout) in enumerate(enc, start=1):
        shapes[f"enc{i}.w"] = (cout, cin, 2, 3)
        shapes[f"enc{i}.b"] = (cout,)
    for gi in range(1, config.gru_groups + 1):
        for n in ("wz", "wr", "wn", "uz", "ur", "un"):
            shapes[f"gru{gi}.{n}"] = (g, g)
        for n in ("bz", "br", "bn"):
            shapes[f"gru{gi}.{n}"] = (g,)
    for i, cout in enumerate(config.enc_filters, start=1):
        shapes[f"skip{i}.w"] = (cout, cout)
        shapes[f"skip{i}.b"] = (cout,)
    for lvl, (cin, cout) in zip((4, 3, 2, 1), dec):
        shapes[f"dec{lvl}.w"] = (cout, cin, 2, 3)
        shapes[f"dec{lvl}.b"] = (cout,)
    return shapes


def init_params(config, rng):
    """Uniform +-sqrt(1/fan_in) weights (fan of 1/H for the GRU matrices),
    zero biases."""
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b") or name.split(".")[1].startswith("b"):
            params[name] = np.zeros(shape, dtype=np.float32)
        elif name.startswith("gru"):
            bound = np.sqrt(1.0 / config.group_size())
            params[name] = rng.uniform(-bound, bound, shape).astype(np.float32)
        else:
            fan_in = shape[1] * 6 if len(shape) == 4 else shape[1]
            bound = np.sqrt(1.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, shape).astype(np.float32)
    return params


def count_params(config):
    """Closed-form trainable tensor count (activation slopes are fixed and
    excluded, matching the checkpoint inventory)."""
    enc, dec = _layer_channels(config)
    g = config.group_size()
    total = sum(cin * cout * 6 + cout for cin, cout in enc)
    total += config.gru_groups * 3 * (g * g + g * g + g)
    total += sum(c * c + c for c in config.enc_filters)
    total += sum(cin * cout * 6 + cout for cin, cout in dec)
    return total


def count_flops(config, num_frames):
    """2 x multiply-accumulates over convs (per output position), transposed
    convs (per input position x kernel), skip 1x1s, GRU matmuls and the
    final mask multiply, for ``num_frames`` frames."""
    enc, dec = _layer_channels(config)
    freqs = config.freq_chain()
    g = config.group_size()
    macs = 0
    for (cin, cout), f_out in zip(enc, freqs[1:]):
        macs += f_out * cout * cin * 6
    macs += config.gru_groups * 6 * g * g
    for c, f in zip(config.enc_filters, freqs[1:]):
        macs += f * c * c
    for (cin, cout), f_in in zip(dec, freqs[:0:-1]):
        macs += f_in * cin * 6 * cout
    macs += 4 * config.freq_bins
    return 2 * macs * num_frames


# ---------------------------------------------------------------------------
# forward pass (shared by inference and training)

def _slope_tensor(channels):
    return ad.Tensor(np.full(channels, PRELU_SLOPE, dtype=np.float32))


def wrap_params(params, tape):
    return {name: ad.Tensor(arr, tape) for name, arr in params.items()}


def mask_graph(config, params_t, x):
    """Build the mask forward graph. ``params_t`` maps names to Tensors,
    ``x`` is a (4, T, 161) Tensor of stacked Re/Im stereo spectrograms.
    Returns (re, im) Tensors of shape (T, 161)."""
    t_len = x.data.shape[1]
    if t_len == 0:
        raise ValueError("empty spectrogram")
    freqs = config.freq_chain()
    c4 = config.enc_filters[-1]
    g = config.group_size()

    h = x
    enc_outs = []
    for i in range(1, 5):
        h = ad.conv2d(h, params_t[f"enc{i}.w"], params_t[f"enc{i}.b"])
        h = ad.prelu(h, _slope_tensor(config.enc_filters[i - 1]))
        enc_outs.append(h)

    frames = ad.reshape(ad.transpose(h, (1, 0, 2)), (t_len, c4 * freqs[4]))
    group_outs = []
    for gi in range(1, config.gru_groups + 1):
        xg = ad.narrow(frames, 1, (gi - 1) * g, g)
        names = ("wz", "wr", "wn", "uz", "ur", "un", "bz", "br", "bn")
        group_outs.append(ad.gru_layer(xg, *[params_t[f"gru{gi}.{n}"] for n in names]))
    bott = ad.concat(group_outs, 1)
    d = ad.transpose(ad.reshape(bott, (t_len, c4, freqs[4])), (1, 0, 2))

    dec_channels = _layer_channels(config)[1]
    for lvl, (cin, cout) in zip((4, 3, 2, 1), dec_channels):
        skip = ad.conv1x1(enc_outs[lvl - 1], params_t[f"skip{lvl}.w"],
                          params_t[f"skip{lvl}.b"])
        d = ad.add(d, skip)
        d = ad.tconv2d(d, params_t[f"dec{lvl}.w"], params_t[f"dec{lvl}.b"],
                       out_f=freqs[lvl - 1])
        if lvl > 1:
            d = ad.prelu(d, _slope_tensor(cout))
        else:
            d = ad.tanh(d)

    re = ad.reshape(ad.narrow(d, 0, 0, 1), (t_len, config.freq_bins))
    im = ad.reshape(ad.narrow(d, 0, 1, 1), (t_len, config.freq_bins))
    return re, im


def spectrogram_stack(spec_left, spec_right):
    """(4, T, 161) float32 network input from the two channel spectrograms."""
    if spec_left.shape != spec_right.shape:
        raise ValueError("left/right spectrogram shapes differ")
    return np.ascontiguousarray(np.stack([
        spec_left.real, spec_left.imag, spec_right.real, spec_right.imag,
    ]).astype(np.float32))


def forward_mask(config, params, spec_left, spec_right):
    """Complex separation mask (T, 161) with |Re|, |Im| <= 1."""
    x = ad.Tensor(spectrogram_stack(spec_left, spec_right))
    re, im = mask_graph(config, wrap_params(params, None), x)
    return (re.data + 1j * im.data).astype(np.complex64)


def _check_stereo(mix):
    mix = np.asarray(mix)
    if mix.ndim != 2 or mix.shape[0] != 2:
        raise ValueError("expected a (2, N) stereo buffer")
    return mix.astype(np.float32, copy=False)


def apply_mask(mask, mix):
    """Masked resynthesis: istft(mask * stft(channel average)) at input length."""
    mix = _check_stereo(mix)
    n = mix.shape[1]
    spec_avg = dsp.stft(dsp.channel_average(mix))
    return dsp.istft(mask * spec_avg, n)


def separate(config, params, mix):
    """Extract the in-region speech estimate from a (2, N) mixture."""
    mix = _check_stereo(mix)
    mask = forward_mask(config, params, dsp.stft(mix[0]), dsp.stft(mix[1]))
    return apply_mask(mask, mix)


# ---------------------------------------------------------------------------
# streaming inference

class StreamState:
    """Per-stream inference state: 160 samples of audio history per channel,
    one past frame per conv/tconv layer, one hidden vector per GRU group and
    the overlap-add tail. Frame-by-frame evolution reproduces the batch
    forward pass. Fused GRU weight views are cached here so the hot loop
    avoids per-frame concatenation."""

    def __init__(self, config, params):
        freqs = config.freq_chain()
        enc, dec = _layer_channels(config)
        self.config = config
        self.audio_hist = np.zeros((2, dsp.HOP), dtype=np.float32)
        self.enc_prev = [np.zeros((cin, freqs[i]), dtype=np.float32)
                         for i, (cin, _) in enumerate(enc)]
        self.gru_h = [np.zeros(config.group_size(), dtype=np.float32)
                      for _ in range(config.gru_groups)]
        self.dec_prev = [np.zeros((cin, freqs[4 - i]), dtype=np.float32)
                         for i, (cin, _) in enumerate(dec)]
        self.ola_tail = np.zeros(dsp.HOP, dtype=np.float32)
        self.frames_seen = 0
        self.gru_fused = []
        for gi in range(1, config.gru_groups + 1):
            w_all = np.concatenate([params[f"gru{gi}.wz"], params[f"gru{gi}.wr"],
                                    params[f"gru{gi}.wn"]], axis=1)
            u_all = np.ascontiguousarray(np.concatenate(
                [params[f"gru{gi}.uz"], params[f"gru{gi}.ur"],
                 params[f"gru{gi}.un"]], axis=1))
            b_all = np.concatenate([params[f"gru{gi}.bz"], params[f"gru{gi}.br"],
                                    params[f"gru{gi}.bn"]])
            self.gru_fused.append((w_all, u_all, b_all))


def _prelu_np(x, channels):
    return np.where(x >= 0, x, np.float32(PRELU_SLOPE) * x)


def stream_step(config, params, state, block):
    """Process one 10 ms stereo block (2, 160). Returns (out_block, state):
    160 output samples once the one-hop synthesis overlap is available
    (None on the first call)."""
    block = np.asarray(block, dtype=np.float32)
    if block.shape != (2, dsp.HOP):
        raise ValueError(f"expected a (2, {dsp.HOP}) sample block")
    win = dsp.sqrt_hann_window()
    window = np.concatenate([state.audio_hist, block], axis=1)
    state.audio_hist = block.copy()

    spec_l = scipy.fft.rfft(window[0] * win, n=dsp.NFFT)
    spec_r = scipy.fft.rfft(window[1] * win, n=dsp.NFFT)
    spec_avg = scipy.fft.rfft(window.mean(axis=0).astype(np.float32) * win, n=dsp.NFFT)

    x = np.ascontiguousarray(np.stack(
        [spec_l.real, spec_l.imag, spec_r.real, spec_r.imag]).astype(np.float32))

    freqs = config.freq_chain()
    enc_outs = []
    h = x
    for i in range(1, 5):
        xpair = np.stack([state.enc_prev[i - 1], h])
        state.enc_prev[i - 1] = h
        h = backend.conv2d_frame(np.ascontiguousarray(xpair.transpose(1, 0, 2)),
                                 params[f"enc{i}.w"], params[f"enc{i}.b"])
        h = _prelu_np(h, config.enc_filters[i - 1])
        enc_outs.append(h)

    g = config.group_size()
    feat = h.reshape(-1)
    parts = []
    for gi, (w_all, u_all, b_all) in enumerate(state.gru_fused):
        xw = np.ascontiguousarray(
            (feat[gi * g : (gi + 1) * g] @ w_all + b_all)[None, :])
        h_seq, _, _, _, _ = backend.gru_seq_forward(xw, state.gru_h[gi], u_all)
        state.gru_h[gi] = h_seq[0]
        parts.append(h_seq[0])
    d = np.concatenate(parts).reshape(config.enc_filters[-1], freqs[4])

    dec_channels = _layer_channels(config)[1]
    for idx, (lvl, (cin, cout)) in enumerate(zip((4, 3, 2, 1), dec_channels)):
        d = d + params[f"skip{lvl}.w"] @ enc_outs[lvl - 1] + params[f"skip{lvl}.b"][:, None]
        xpair = np.stack([state.dec_prev[idx], d])
        state.dec_prev[idx] = d
        d = backend.tconv2d_frame(np.ascontiguousarray(xpair.transpose(1, 0, 2)),
                                  params[f"dec{lvl}.w"], params[f"dec{lvl}.b"],
                                  freqs[lvl - 1])
        d = _prelu_np(d, cout) if lvl > 1 else np.tanh(d)

    mask = (d[0] + 1j * d[1]).astype(np.complex64)
    frame = scipy.fft.irfft(mask * spec_avg.astype(np.complex64), n=dsp.NFFT) * win
    out = None if state.frames_seen == 0 else state.ola_tail + frame[: dsp.HOP]
    state.ola_tail = frame[dsp.HOP :].copy()
    state.frames_seen += 1
    return out, state


def separate_streaming(config, params, mix):
    """Streaming-mode separation of a whole clip; equals :func:`separate`
    within float tolerance."""
    mix = _check_stereo(mix)
    n = mix.shape[1]
    n_blocks = -(-n // dsp.HOP)
    padded = np.zeros((2, n_blocks * dsp.HOP), dtype=np.float32)
    padded[:, :n] = mix
    state = StreamState(config, params)
    chunks = []
    for b in range(n_blocks):
        out, state = stream_step(config, params, state,
                                 padded[:, b * dsp.HOP : (b + 1) * dsp.HOP])
        if out is not None:
            chunks.append(out)
    out, state = stream_step(config, params, state,
                             np.zeros((2, dsp.HOP), dtype=np.float32))
    chunks.append(out)
    return np.concatenate(chunks)[:n]


# ---------------------------------------------------------------------------
# checkpoint I/O

class CheckpointError(Exception):
    pass


def save_checkpoint(path, config, params):
    """Binary checkpoint: magic 'RSEP', little-endian u32 version, u64 header
    length, JSON header (config + ordered tensor directory), raw float32."""
    shapes = param_shapes(config)
    directory = []
    offset = 0
    blobs = []
    for name, shape in shapes.items():
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        if arr.shape != shape:
            raise CheckpointError(f"tensor {name} has shape {arr.shape}, expected {shape}")
        directory.append({"name": name, "shape": list(shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    header = json.dumps({"config": config.to_dict(), "tensors": directory},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + header_len:
        raise CheckpointError("truncated checkpoint: incomplete header")
    header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    config = CruseConfig.from_dict(header["config"])
    data = raw[16 + header_len :]
    expected = param_shapes(config)
    params = {}
    for entry in header["tensors"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        if name not in expected or expected[name] != shape:
            raise CheckpointError(f"tensor {name} with shape {shape} does not match config")
        nbytes = int(np.prod(shape)) * 4
        if offset + nbytes > len(data):
            raise CheckpointError("truncated checkpoint: tensor data missing")
        params[name] = np.frombuffer(
            data[offset : offset + nbytes], dtype="<f4").reshape(shape).copy()
    if set(params) != set(expected):
        raise CheckpointError("checkpoint tensor directory incomplete")
    return config, params
