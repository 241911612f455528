"""Pure-numpy reference implementations of the hot kernels.

The compiled extension (``roisep.backend._core``) mirrors these exactly;
equivalence is enforced by tests. Keep the arithmetic here in lockstep with
the .pyx file.
"""

import numpy as np

# 81-tap fractional-delay kernel tables (offset j - 40 for j in 0..80).
KERNEL_TAPS = 81
_J = np.arange(KERNEL_TAPS)
_OFFS = _J - 40
_COS81 = np.cos(2.0 * np.pi * _OFFS / KERNEL_TAPS)
_SIN81 = np.sin(2.0 * np.pi * _OFFS / KERNEL_TAPS)
_SGN = np.where(_J % 2 == 1, 1.0, -1.0)  # (-1)**(j+1)

_ISM_CHUNK = 16384


def ism_scatter(delays, amps, out_len):
    """Accumulate Hann-windowed-sinc kernels at fractional sample delays.

    Each arrival k deposits an 81-tap kernel centered at ``delays[k]``
    (in samples) scaled by ``amps[k]``. Taps falling outside [0, out_len)
    are dropped.
    """
    delays = np.asarray(delays, dtype=np.float64)
    amps = np.asarray(amps, dtype=np.float64)
    out = np.zeros(out_len, dtype=np.float64)
    for lo in range(0, delays.shape[0], _ISM_CHUNK):
        d = delays[lo : lo + _ISM_CHUNK]
        a = amps[lo : lo + _ISM_CHUNK]
        fl = np.floor(d).astype(np.int64)
        frac = d - fl
        u = _OFFS[None, :] - frac[:, None]
        near = np.abs(u) < 1e-9
        u_safe = np.where(near, 1.0, u)
        sinc = _SGN[None, :] * np.sin(np.pi * frac)[:, None] / (np.pi * u_safe)
        sinc = np.where(near, 1.0, sinc)
        win = 0.5 + 0.5 * (
            _COS81[None, :] * np.cos(2.0 * np.pi * frac / KERNEL_TAPS)[:, None]
            + _SIN81[None, :] * np.sin(2.0 * np.pi * frac / KERNEL_TAPS)[:, None]
        )
        vals = a[:, None] * sinc * win
        idx = fl[:, None] - 40 + _J[None, :]
        ok = (idx >= 0) & (idx < out_len)
        out += np.bincount(idx[ok], weights=vals[ok], minlength=out_len)
    return out


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def gru_seq_forward(xw, h0, u):
    """Run a GRU over a sequence. ``xw`` is the precomputed input projection
    x @ [Wz|Wr|Wn] + [bz|br|bn], shape (T, 3H); ``u`` is [Uz|Ur|Un], (H, 3H).

    Returns (h_seq, z, r, n, hun) where the last four are the per-step
    activations cached for the backward pass.
    """
    T = xw.shape[0]
    H = h0.shape[0]
    dt = xw.dtype
    h_seq = np.empty((T, H), dtype=dt)
    z_c = np.empty((T, H), dtype=dt)
    r_c = np.empty((T, H), dtype=dt)
    n_c = np.empty((T, H), dtype=dt)
    hun_c = np.empty((T, H), dtype=dt)
    h = h0
    for t in range(T):
        hu = h @ u
        z = _sigmoid(xw[t, :H] + hu[:H])
        r = _sigmoid(xw[t, H : 2 * H] + hu[H : 2 * H])
        hun = hu[2 * H :]
        n = np.tanh(xw[t, 2 * H :] + r * hun)
        h = (1.0 - z) * n + z * h
        h_seq[t] = h
        z_c[t] = z
        r_c[t] = r
        n_c[t] = n
        hun_c[t] = hun
    return h_seq, z_c, r_c, n_c, hun_c


def gru_seq_backward(h_seq, h0, u, z, r, n, hun, gh_seq):
    """Backward pass matching gru_seq_forward.

    Returns (gxw, gh0, gu): gradients w.r.t. the input projection, the
    initial hidden state and the recurrent matrix.
    """
    T, H = h_seq.shape
    dt = h_seq.dtype
    gxw = np.empty((T, 3 * H), dtype=dt)
    gu = np.zeros((H, 3 * H), dtype=dt)
    gh = np.zeros(H, dtype=dt)
    dhu = np.empty(3 * H, dtype=dt)
    for t in range(T - 1, -1, -1):
        gh = gh + gh_seq[t]
        hp = h_seq[t - 1] if t > 0 else h0
        zt, rt, nt, ht = z[t], r[t], n[t], hun[t]
        dsz = gh * (hp - nt) * zt * (1.0 - zt)
        dsn = gh * (1.0 - zt) * (1.0 - nt * nt)
        dsr = dsn * ht * rt * (1.0 - rt)
        gxw[t, :H] = dsz
        gxw[t, H : 2 * H] = dsr
        gxw[t, 2 * H :] = dsn
        dhu[:H] = dsz
        dhu[H : 2 * H] = dsr
        dhu[2 * H :] = dsn * rt
        gu += np.outer(hp, dhu)
        gh = gh * zt + u @ dhu
    return gxw, gh, gu


def conv2d_frame(xpair, w, b):
    """Single-frame causal conv step: xpair (Cin, 2, F) holds the previous
    and current input frames; returns the current output frame (Cout, Fo)
    with kernel (2, 3) and frequency stride 2, no frequency padding.
    """
    f_in = xpair.shape[2]
    cols = np.lib.stride_tricks.sliding_window_view(xpair, 3, axis=2)[:, :, ::2, :]
    y = np.einsum("oidk,idfk->of", w, cols, optimize=True)
    y += b[:, None]
    return y.astype(xpair.dtype, copy=False)


def tconv2d_frame(xpair, w, b, out_f):
    """Single-frame causal transposed-conv step. xpair (Cin, 2, F) holds the
    previous and current frames (index 1 = current); frequency upsampling
    scatters each input bin f to output bins 2f+df, df in {0,1,2}. ``out_f``
    selects between the natural size 2F+1 and one extra high-edge zero.
    """
    f_in = xpair.shape[2]
    y = np.zeros((w.shape[0], out_f), dtype=xpair.dtype)
    z = np.einsum("oid,if->odf", w[:, :, 0, :], xpair[:, 0, :], optimize=True)
    z += np.einsum("oid,if->odf", w[:, :, 1, :], xpair[:, 1, :], optimize=True)
    for d in range(3):
        y[:, d : d + 2 * (f_in - 1) + 1 : 2] += z[:, d, :]
    y += b[:, None]
    return y
