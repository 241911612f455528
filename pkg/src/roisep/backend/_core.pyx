# Compiled kernels matching roisep.backend.python; float32 network paths plus
# the float64 RIR scatter. Keep arithmetic in lockstep with python.py.

import numpy as np

from libc.math cimport cos, exp, floor, sin, tanh
from scipy.linalg.cython_blas cimport sgemv, sger

cdef double M_PI = 3.141592653589793

cdef double[81] _COS81
cdef double[81] _SIN81
cdef double[81] _SGN

cdef int _j
for _j in range(81):
    _COS81[_j] = cos(2.0 * M_PI * (_j - 40) / 81.0)
    _SIN81[_j] = sin(2.0 * M_PI * (_j - 40) / 81.0)
    _SGN[_j] = 1.0 if _j % 2 == 1 else -1.0


def ism_scatter(const double[::1] delays, const double[::1] amps, Py_ssize_t out_len):
    out_np = np.zeros(out_len, dtype=np.float64)
    cdef double[::1] out = out_np
    cdef Py_ssize_t k, j, fl, idx
    cdef double d, a, frac, sp, cf, sf, u, s, w
    cdef Py_ssize_t n_arr = delays.shape[0]
    for k in range(n_arr):
        d = delays[k]
        a = amps[k]
        fl = <Py_ssize_t>floor(d)
        frac = d - fl
        sp = sin(M_PI * frac)
        cf = cos(2.0 * M_PI * frac / 81.0)
        sf = sin(2.0 * M_PI * frac / 81.0)
        for j in range(81):
            idx = fl - 40 + j
            if idx < 0 or idx >= out_len:
                continue
            u = (j - 40) - frac
            if -1e-9 < u < 1e-9:
                s = 1.0
            else:
                s = _SGN[j] * sp / (M_PI * u)
            w = 0.5 + 0.5 * (_COS81[j] * cf + _SIN81[j] * sf)
            out[idx] += a * s * w
    return out_np


cdef inline float _sigmoidf(float x) noexcept nogil:
    return <float>(1.0 / (1.0 + exp(-<double>x)))


def gru_seq_forward(const float[:, ::1] xw, const float[::1] h0, const float[:, ::1] u):
    cdef Py_ssize_t T = xw.shape[0]
    cdef Py_ssize_t H = h0.shape[0]
    h_seq_np = np.empty((T, H), dtype=np.float32)
    z_np = np.empty((T, H), dtype=np.float32)
    r_np = np.empty((T, H), dtype=np.float32)
    n_np = np.empty((T, H), dtype=np.float32)
    hun_np = np.empty((T, H), dtype=np.float32)
    hu_np = np.empty(3 * H, dtype=np.float32)
    h_np = np.array(h0, dtype=np.float32, copy=True)
    cdef float[:, ::1] h_seq = h_seq_np
    cdef float[:, ::1] z = z_np
    cdef float[:, ::1] r = r_np
    cdef float[:, ::1] n = n_np
    cdef float[:, ::1] hun = hun_np
    cdef float[::1] hu = hu_np
    cdef float[::1] h = h_np

    cdef int m = <int>(3 * H), nn = <int>H, inc = 1
    cdef float one = 1.0, zero = 0.0
    cdef Py_ssize_t t, i
    cdef float zt, rt, nt
    for t in range(T):
        sgemv("N", &m, &nn, &one, <float*>&u[0, 0], &m, <float*>&h[0], &inc,
              &zero, &hu[0], &inc)
        for i in range(H):
            zt = _sigmoidf(xw[t, i] + hu[i])
            rt = _sigmoidf(xw[t, H + i] + hu[H + i])
            nt = <float>tanh(<double>(xw[t, 2 * H + i] + rt * hu[2 * H + i]))
            z[t, i] = zt
            r[t, i] = rt
            n[t, i] = nt
            hun[t, i] = hu[2 * H + i]
            h[i] = (1.0 - zt) * nt + zt * h[i]
            h_seq[t, i] = h[i]
    return h_seq_np, z_np, r_np, n_np, hun_np


def gru_seq_backward(const float[:, ::1] h_seq, const float[::1] h0,
                     const float[:, ::1] u, const float[:, ::1] z,
                     const float[:, ::1] r, const float[:, ::1] n,
                     const float[:, ::1] hun, const float[:, ::1] gh_seq):
    cdef Py_ssize_t T = h_seq.shape[0]
    cdef Py_ssize_t H = h_seq.shape[1]
    gxw_np = np.empty((T, 3 * H), dtype=np.float32)
    gu_np = np.zeros((H, 3 * H), dtype=np.float32)
    gh_np = np.zeros(H, dtype=np.float32)
    dhu_np = np.empty(3 * H, dtype=np.float32)
    cdef float[:, ::1] gxw = gxw_np
    cdef float[:, ::1] gu = gu_np
    cdef float[::1] gh = gh_np
    cdef float[::1] dhu = dhu_np

    cdef int m = <int>(3 * H), nn = <int>H, inc = 1
    cdef float one = 1.0
    cdef Py_ssize_t t, i
    cdef const float* hp
    cdef float ghv, zt, rt, nt, ht, dsz, dsn, dsr
    for t in range(T - 1, -1, -1):
        hp = &h_seq[t - 1, 0] if t > 0 else &h0[0]
        for i in range(H):
            ghv = gh[i] + gh_seq[t, i]
            zt = z[t, i]
            rt = r[t, i]
            nt = n[t, i]
            ht = hun[t, i]
            dsz = ghv * (hp[i] - nt) * zt * (1.0 - zt)
            dsn = ghv * (1.0 - zt) * (1.0 - nt * nt)
            dsr = dsn * ht * rt * (1.0 - rt)
            gxw[t, i] = dsz
            gxw[t, H + i] = dsr
            gxw[t, 2 * H + i] = dsn
            dhu[i] = dsz
            dhu[H + i] = dsr
            dhu[2 * H + i] = dsn * rt
            gh[i] = ghv * zt
        sger(&m, &nn, &one, &dhu[0], &inc, <float*>hp, &inc, <float*>&gu[0, 0], &m)
        sgemv("T", &m, &nn, &one, <float*>&u[0, 0], &m, &dhu[0], &inc,
              &one, &gh[0], &inc)
    return gxw_np, gh_np, gu_np


def conv2d_frame(const float[:, :, ::1] xpair, const float[:, :, :, ::1] w,
                 const float[::1] b):
    cdef Py_ssize_t cin = xpair.shape[0]
    cdef Py_ssize_t f_in = xpair.shape[2]
    cdef Py_ssize_t cout = w.shape[0]
    cdef Py_ssize_t f_out = (f_in - 3) // 2 + 1
    y_np = np.empty((cout, f_out), dtype=np.float32)
    cdef float[:, ::1] y = y_np
    cdef Py_ssize_t o, fo, i, f0
    cdef float acc
    for o in range(cout):
        for fo in range(f_out):
            f0 = 2 * fo
            acc = b[o]
            for i in range(cin):
                acc += (w[o, i, 0, 0] * xpair[i, 0, f0]
                        + w[o, i, 0, 1] * xpair[i, 0, f0 + 1]
                        + w[o, i, 0, 2] * xpair[i, 0, f0 + 2]
                        + w[o, i, 1, 0] * xpair[i, 1, f0]
                        + w[o, i, 1, 1] * xpair[i, 1, f0 + 1]
                        + w[o, i, 1, 2] * xpair[i, 1, f0 + 2])
            y[o, fo] = acc
    return y_np


def tconv2d_frame(const float[:, :, ::1] xpair, const float[:, :, :, ::1] w,
                  const float[::1] b, Py_ssize_t out_f):
    cdef Py_ssize_t cin = xpair.shape[0]
    cdef Py_ssize_t f_in = xpair.shape[2]
    cdef Py_ssize_t cout = w.shape[0]
    y_np = np.zeros((cout, out_f), dtype=np.float32)
    cdef float[:, ::1] y = y_np
    cdef Py_ssize_t o, i, f, d
    cdef float xp, xc
    for o in range(cout):
        for i in range(cin):
            for f in range(f_in):
                xp = xpair[i, 0, f]
                xc = xpair[i, 1, f]
                for d in range(3):
                    y[o, 2 * f + d] += w[o, i, 0, d] * xp + w[o, i, 1, d] * xc
        for f in range(out_f):
            y[o, f] += b[o]
    return y_np
