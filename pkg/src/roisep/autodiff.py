"""Minimal dense-tensor reverse-mode autodiff covering exactly the op set
the masking network and its time-domain loss need.

A :class:`Tape` records operations in execution order; since execution order
is topological, the backward pass is a single reverse sweep. Tensors created
without a tape act as constants: ops still compute, nothing is recorded, so
the same forward code serves training and inference.
"""

import numpy as np
import scipy.fft

from . import backend
from .dsp import FREQ_BINS, HOP, NFFT, WIN_LEN, sqrt_hann_window


class Tensor:
    """Dense array node. ``grad`` is populated by Tape.backward for nodes
    reachable from the loss."""

    __slots__ = ("data", "grad", "tape")

    def __init__(self, data, tape=None):
        self.data = np.asarray(data)
        self.grad = None
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape


class Tape:
    """Execution-ordered operation record for one forward pass."""

    __slots__ = ("_ops",)

    def __init__(self):
        self._ops = []

    def backward(self, loss):
        """Accumulate gradients of a scalar loss into every recorded node."""
        if loss.data.size != 1:
            raise ValueError("loss must be scalar")
        loss.grad = np.ones_like(loss.data)
        for out, vjp in reversed(self._ops):
            if out.grad is not None:
                vjp(out.grad)


def _tape_of(*tensors):
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ValueError("operands recorded on different tapes")
            tape = t.tape
    return tape


def _make(data, tape, vjp):
    out = Tensor(data, tape)
    if tape is not None:
        tape._ops.append((out, vjp))
    return out


def _acc(t, g):
    if t.tape is None:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def grad_of(t):
    """Gradient of a leaf after backward; zeros for disconnected leaves."""
    return t.grad if t.grad is not None else np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# elementwise and shaping primitives

def add(a, b):
    def vjp(g):
        _acc(a, g)
        _acc(b, g)
    return _make(a.data + b.data, _tape_of(a, b), vjp)


def sub(a, b):
    def vjp(g):
        _acc(a, g)
        _acc(b, -g)
    return _make(a.data - b.data, _tape_of(a, b), vjp)


def mul(a, b):
    def vjp(g):
        _acc(a, g * b.data)
        _acc(b, g * a.data)
    return _make(a.data * b.data, _tape_of(a, b), vjp)


def mulc(a, c):
    """Multiply by a constant array or scalar."""
    def vjp(g):
        _acc(a, g * c)
    return _make(a.data * c, _tape_of(a), vjp)


def neg(a):
    def vjp(g):
        _acc(a, -g)
    return _make(-a.data, _tape_of(a), vjp)


def matmul(a, b):
    """a @ b for 2D x 2D or 1D x 2D operands."""
    def vjp(g):
        if a.data.ndim == 1:
            _acc(a, g @ b.data.T)
            _acc(b, np.outer(a.data, g))
        else:
            _acc(a, g @ b.data.T)
            _acc(b, a.data.T @ g)
    return _make(a.data @ b.data, _tape_of(a, b), vjp)


def sigmoid(a):
    y = 1.0 / (1.0 + np.exp(-a.data))

    def vjp(g):
        _acc(a, g * y * (1.0 - y))
    return _make(y, _tape_of(a), vjp)


def tanh(a):
    y = np.tanh(a.data)

    def vjp(g):
        _acc(a, g * (1.0 - y * y))
    return _make(y, _tape_of(a), vjp)


def prelu(x, alpha):
    """PReLU with one slope per leading-axis channel."""
    a_b = alpha.data.reshape(alpha.data.shape + (1,) * (x.data.ndim - 1))
    pos = x.data >= 0
    y = np.where(pos, x.data, a_b * x.data)

    def vjp(g):
        _acc(x, g * np.where(pos, np.ones((), dtype=x.data.dtype), a_b))
        ga = np.where(pos, 0.0, g * x.data)
        _acc(alpha, ga.reshape(alpha.data.shape[0], -1).sum(axis=1).astype(alpha.data.dtype))
    return _make(y, _tape_of(x, alpha), vjp)


def sum_all(a):
    def vjp(g):
        _acc(a, np.broadcast_to(g, a.data.shape))
    return _make(np.asarray(a.data.sum()), _tape_of(a), vjp)


def mean_all(a):
    size = a.data.size

    def vjp(g):
        _acc(a, np.broadcast_to(g / size, a.data.shape))
    return _make(np.asarray(a.data.mean()), _tape_of(a), vjp)


def sub_scalar(a, s):
    """Subtract a scalar tensor from every element."""
    def vjp(g):
        _acc(a, g)
        _acc(s, np.asarray(-g.sum()))
    return _make(a.data - s.data, _tape_of(a, s), vjp)


def scale(s, c):
    """Scalar tensor times constant array."""
    def vjp(g):
        _acc(s, np.asarray((g * c).sum()))
    return _make(s.data * c, _tape_of(s), vjp)


def log10(a):
    ln10 = np.log(10.0)

    def vjp(g):
        _acc(a, g / (a.data * ln10))
    return _make(np.log10(a.data), _tape_of(a), vjp)


def clamp(a, lo=None, hi=None):
    y = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data > lo
    if hi is not None:
        inside &= a.data < hi

    def vjp(g):
        _acc(a, g * inside)
    return _make(y, _tape_of(a), vjp)


def concat(tensors, axis):
    sizes = [t.data.shape[axis] for t in tensors]
    offs = np.cumsum([0] + sizes)

    def vjp(g):
        for t, lo, hi in zip(tensors, offs[:-1], offs[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _acc(t, g[tuple(sl)])
    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 _tape_of(*tensors), vjp)


def narrow(a, axis, start, length):
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[sl] = g
        _acc(a, ga)
    return _make(a.data[sl].copy(), _tape_of(a), vjp)


def reshape(a, shape):
    def vjp(g):
        _acc(a, g.reshape(a.data.shape))
    return _make(a.data.reshape(shape), _tape_of(a), vjp)


def transpose(a, axes):
    inv = np.argsort(axes)

    def vjp(g):
        _acc(a, g.transpose(inv))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), _tape_of(a), vjp)


# ---------------------------------------------------------------------------
# convolution primitives (channels, time, frequency layout)

def _conv_cols(xp, f_out):
    # xp: (C, T+1, F) time-padded input -> windows (C, T, f_out, 2, 3)
    v = np.lib.stride_tricks.sliding_window_view(xp, (2, 3), axis=(1, 2))
    return v[:, :, ::2][:, :, :f_out]


def conv2d(x, w, b):
    """Causal valid conv: x (Cin,T,F), w (Cout,Cin,2,3), stride (1,2), one
    leading zero frame in time, no frequency padding. F' = (F-3)//2 + 1."""
    cin, t_len, f_in = x.data.shape
    if w.data.shape[1] != cin or w.data.shape[2:] != (2, 3):
        raise ValueError("conv2d weight shape mismatch")
    f_out = (f_in - 3) // 2 + 1
    xp = np.concatenate(
        [np.zeros((cin, 1, f_in), dtype=x.data.dtype), x.data], axis=1)
    cols = _conv_cols(xp, f_out)
    y = np.einsum("oidk,itfdk->otf", w.data, cols, optimize=True)
    y += b.data[:, None, None]
    y = y.astype(x.data.dtype, copy=False)

    def vjp(g):
        _acc(w, np.einsum("otf,itfdk->oidk", g, cols, optimize=True).astype(w.data.dtype))
        _acc(b, g.sum(axis=(1, 2)).astype(b.data.dtype))
        gcols = np.einsum("otf,oidk->itfdk", g, w.data, optimize=True)
        gxp = np.zeros_like(xp)
        for dt in range(2):
            for df in range(3):
                gxp[:, dt : dt + t_len, df : df + 2 * (f_out - 1) + 1 : 2] += \
                    gcols[:, :, :, dt, df]
        _acc(x, gxp[:, 1:, :])
    return _make(y, _tape_of(x, w, b), vjp)


def tconv2d(x, w, b, out_f):
    """Causal transposed conv, adjoint of conv2d along frequency: each input
    bin f scatters to output bins 2f+df. out_f is 2F+1 or 2F+2 (one optional
    zero of high-edge output padding). Time tap 1 acts on the current frame,
    tap 0 on the previous one."""
    cin, t_len, f_in = x.data.shape
    cout = w.data.shape[0]
    nat = 2 * (f_in - 1) + 3
    if out_f not in (nat, nat + 1):
        raise ValueError(f"out_f must be {nat} or {nat + 1}")
    xprev = np.concatenate(
        [np.zeros((cin, 1, f_in), dtype=x.data.dtype), x.data[:, :-1]], axis=1)
    z = np.einsum("oid,itf->otdf", w.data[:, :, 1, :], x.data, optimize=True)
    z += np.einsum("oid,itf->otdf", w.data[:, :, 0, :], xprev, optimize=True)
    y = np.zeros((cout, t_len, out_f), dtype=x.data.dtype)
    for df in range(3):
        y[:, :, df : df + 2 * (f_in - 1) + 1 : 2] += z[:, :, df, :]
    y += b.data[:, None, None]

    def vjp(g):
        gz = np.stack(
            [g[:, :, df : df + 2 * (f_in - 1) + 1 : 2] for df in range(3)], axis=2)
        gw1 = np.einsum("otdf,itf->oid", gz, x.data, optimize=True)
        gw0 = np.einsum("otdf,itf->oid", gz, xprev, optimize=True)
        _acc(w, np.stack([gw0, gw1], axis=2).astype(w.data.dtype))
        _acc(b, g.sum(axis=(1, 2)).astype(b.data.dtype))
        gx = np.einsum("oid,otdf->itf", w.data[:, :, 1, :], gz, optimize=True)
        gx0 = np.einsum("oid,otdf->itf", w.data[:, :, 0, :], gz, optimize=True)
        gx[:, :-1] += gx0[:, 1:]
        _acc(x, gx.astype(x.data.dtype))
    return _make(y, _tape_of(x, w, b), vjp)


def conv1x1(x, w, b):
    """Channel-mixing 1x1 conv: x (Cin,T,F), w (Cout,Cin)."""
    y = np.tensordot(w.data, x.data, axes=([1], [0])) + b.data[:, None, None]

    def vjp(g):
        _acc(w, np.tensordot(g, x.data, axes=([1, 2], [1, 2])).astype(w.data.dtype))
        _acc(b, g.sum(axis=(1, 2)).astype(b.data.dtype))
        _acc(x, np.tensordot(w.data.T, g, axes=([1], [0])).astype(x.data.dtype))
    return _make(y.astype(x.data.dtype, copy=False), _tape_of(x, w, b), vjp)


# ---------------------------------------------------------------------------
# recurrent primitives

def gru_cell(x, h, wz, wr, wn, uz, ur, un, bz, br, bn):
    """One GRU step built from primitives (oracle for the fused layer):
    z = sig(xWz + hUz + bz), r = sig(xWr + hUr + br),
    n = tanh(xWn + r*(hUn) + bn), h' = (1-z)*n + z*h."""
    z = sigmoid(add(add(matmul(x, wz), matmul(h, uz)), bz))
    r = sigmoid(add(add(matmul(x, wr), matmul(h, ur)), br))
    n = tanh(add(add(matmul(x, wn), mul(r, matmul(h, un))), bn))
    one = Tensor(np.ones_like(z.data))
    return add(mul(sub(one, z), n), mul(z, h))


def gru_layer(x_seq, wz, wr, wn, uz, ur, un, bz, br, bn):
    """Fused GRU over a (T, I) sequence with zero initial state, hidden size
    H = columns of wz; forward/backward run on the kernel backend."""
    w_all = np.concatenate([wz.data, wr.data, wn.data], axis=1)
    u_all = np.ascontiguousarray(
        np.concatenate([uz.data, ur.data, un.data], axis=1))
    b_all = np.concatenate([bz.data, br.data, bn.data])
    h_dim = wz.data.shape[1]
    xw = np.ascontiguousarray(x_seq.data @ w_all + b_all)
    h0 = np.zeros(h_dim, dtype=xw.dtype)
    h_seq, z_c, r_c, n_c, hun_c = backend.gru_seq_forward(xw, h0, u_all)

    def vjp(g):
        gxw, _gh0, gu = backend.gru_seq_backward(
            h_seq, h0, u_all, z_c, r_c, n_c, hun_c, np.ascontiguousarray(g))
        _acc(x_seq, (gxw @ w_all.T).astype(x_seq.data.dtype))
        gw = x_seq.data.T @ gxw
        gb = gxw.sum(axis=0)
        for t, lo in ((wz, 0), (wr, h_dim), (wn, 2 * h_dim)):
            _acc(t, gw[:, lo : lo + h_dim])
        for t, lo in ((uz, 0), (ur, h_dim), (un, 2 * h_dim)):
            _acc(t, gu[:, lo : lo + h_dim])
        for t, lo in ((bz, 0), (br, h_dim), (bn, 2 * h_dim)):
            _acc(t, gb[lo : lo + h_dim])
    return _make(h_seq, _tape_of(x_seq, wz, wr, wn, uz, ur, un, bz, br, bn), vjp)


# ---------------------------------------------------------------------------
# synthesis (differentiable iSTFT on split real/imaginary spectrogram parts)

def istft_pair(re, im, out_len):
    """Differentiable inverse STFT of a (T, 161) spectrogram given as two
    real tensors. Matches dsp.istft (sqrt-Hann synthesis, overlap-add, front
    pad removal)."""
    t_frames = re.data.shape[0]
    spec = re.data + 1j * im.data
    frames = scipy.fft.irfft(spec, n=NFFT, axis=1)
    win = sqrt_hann_window(frames.dtype)
    frames = frames * win[None, :]
    total = (t_frames - 1) * HOP + WIN_LEN
    if out_len > total - HOP:
        raise ValueError("out_len exceeds synthesizable length")
    y = np.zeros(total, dtype=frames.dtype)
    for t in range(t_frames):
        y[t * HOP : t * HOP + WIN_LEN] += frames[t]
    y = y[HOP : HOP + out_len]

    # one-sided adjoint scale: interior bins appear twice in the real signal
    bin_scale = np.full(FREQ_BINS, 2.0 / NFFT)
    bin_scale[0] = bin_scale[-1] = 1.0 / NFFT

    def vjp(g):
        gy = np.zeros(total, dtype=g.dtype)
        gy[HOP : HOP + out_len] = g
        idx = np.arange(WIN_LEN)[None, :] + HOP * np.arange(t_frames)[:, None]
        gframes = gy[idx] * win[None, :]
        spec_g = scipy.fft.rfft(gframes, n=NFFT, axis=1)
        gre = spec_g.real * bin_scale
        gim = spec_g.imag * bin_scale
        gim[:, 0] = 0.0
        gim[:, -1] = 0.0
        _acc(re, gre.astype(re.data.dtype))
        _acc(im, gim.astype(im.data.dtype))
    return _make(y, _tape_of(re, im), vjp)


# ---------------------------------------------------------------------------
# finite-difference checking

def gradient_check(f, inputs, eps=1e-4, max_coords=25, seed=0):
    """Max relative error between tape gradients of scalar-valued ``f`` and
    central differences, over up to ``max_coords`` sampled coordinates per
    input. Run with float64 inputs."""
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    tape = Tape()
    leaves = [Tensor(x.copy(), tape) for x in inputs]
    loss = f(*leaves)
    tape.backward(loss)

    def value_at(xs):
        out = f(*[Tensor(x) for x in xs])
        return float(out.data)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, x in enumerate(inputs):
        n = x.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
        analytic = grad_of(leaves[k]).reshape(-1)
        for idx in coords:
            bumped = [a.copy() for a in inputs]
            bumped[k].reshape(-1)[idx] += eps
            f_plus = value_at(bumped)
            bumped[k].reshape(-1)[idx] -= 2 * eps
            f_minus = value_at(bumped)
            numeric = (f_plus - f_minus) / (2 * eps)
            a = analytic[idx]
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, rel)
    return worst
