"""JIT-compiled convolution kernels.

Hot loops for the 3x3(x3) same-padding convolutions. Sequential, fixed
reduction order, no fastmath: results are bitwise reproducible for a given
dtype. Inputs arrive pre-padded by one voxel per spatial side; the input
gradient is the forward kernel applied to the padded output gradient with
flipped, transposed weights.
"""

import numpy as np
from numba import njit


@njit(cache=True, fastmath=False)
def conv3d_fwd(xp, w, b, y):
    """y[o] = b[o] + sum_c w[o,c] * xp[c], valid 3x3x3 over padded xp."""
    n_out, n_in = w.shape[0], w.shape[1]
    nx, ny, nz = y.shape[1], y.shape[2], y.shape[3]
    for o in range(n_out):
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    y[o, i, j, k] = b[o]
                for c in range(n_in):
                    for a in range(3):
                        for bb in range(3):
                            w0 = w[o, c, a, bb, 0]
                            w1 = w[o, c, a, bb, 1]
                            w2 = w[o, c, a, bb, 2]
                            xr = xp[c, i + a, j + bb]
                            for k in range(nz):
                                y[o, i, j, k] += w0 * xr[k] + w1 * xr[k + 1] + w2 * xr[k + 2]


@njit(cache=True, fastmath=False)
def conv3d_dw(xp, dy, dw):
    """dw[o,c,a,b,g] = sum over positions of dy[o] * xp[c] shifted by (a,b,g)."""
    n_out, n_in = dw.shape[0], dw.shape[1]
    nx, ny, nz = dy.shape[1], dy.shape[2], dy.shape[3]
    for o in range(n_out):
        for c in range(n_in):
            for a in range(3):
                for bb in range(3):
                    a0 = 0.0
                    a1 = 0.0
                    a2 = 0.0
                    for i in range(nx):
                        for j in range(ny):
                            dr = dy[o, i, j]
                            xr = xp[c, i + a, j + bb]
                            s0 = 0.0
                            s1 = 0.0
                            s2 = 0.0
                            for k in range(nz):
                                d = dr[k]
                                s0 += d * xr[k]
                                s1 += d * xr[k + 1]
                                s2 += d * xr[k + 2]
                            a0 += s0
                            a1 += s1
                            a2 += s2
                    dw[o, c, a, bb, 0] = a0
                    dw[o, c, a, bb, 1] = a1
                    dw[o, c, a, bb, 2] = a2


@njit(cache=True, fastmath=False)
def conv2d_fwd(xp, w, b, y):
    """2D analog of conv3d_fwd (3x3 taps, padded input)."""
    n_out, n_in = w.shape[0], w.shape[1]
    nx, ny = y.shape[1], y.shape[2]
    for o in range(n_out):
        for i in range(nx):
            for j in range(ny):
                y[o, i, j] = b[o]
            for c in range(n_in):
                for a in range(3):
                    w0 = w[o, c, a, 0]
                    w1 = w[o, c, a, 1]
                    w2 = w[o, c, a, 2]
                    xr = xp[c, i + a]
                    for j in range(ny):
                        y[o, i, j] += w0 * xr[j] + w1 * xr[j + 1] + w2 * xr[j + 2]


@njit(cache=True, fastmath=False)
def conv2d_dw(xp, dy, dw):
    """2D analog of conv3d_dw."""
    n_out, n_in = dw.shape[0], dw.shape[1]
    nx, ny = dy.shape[1], dy.shape[2]
    for o in range(n_out):
        for c in range(n_in):
            for a in range(3):
                a0 = 0.0
                a1 = 0.0
                a2 = 0.0
                for i in range(nx):
                    dr = dy[o, i]
                    xr = xp[c, i + a]
                    s0 = 0.0
                    s1 = 0.0
                    s2 = 0.0
                    for j in range(ny):
                        d = dr[j]
                        s0 += d * xr[j]
                        s1 += d * xr[j + 1]
                        s2 += d * xr[j + 2]
                    a0 += s0
                    a1 += s1
                    a2 += s2
                dw[o, c, a, 0] = a0
                dw[o, c, a, 1] = a1
                dw[o, c, a, 2] = a2


def pad1(x: np.ndarray) -> np.ndarray:
    """Zero-pad the spatial axes of (C, ...) by one on each side."""
    spatial = x.ndim - 1
    out = np.zeros((x.shape[0],) + tuple(n + 2 for n in x.shape[1:]), dtype=x.dtype)
    if spatial == 3:
        out[:, 1:-1, 1:-1, 1:-1] = x
    elif spatial == 2:
        out[:, 1:-1, 1:-1] = x
    else:
        raise ValueError(f"expected 2 or 3 spatial axes, got {spatial}")
    return out


def flip_transpose(w: np.ndarray) -> np.ndarray:
    """Weights for the input-gradient pass: swap in/out, reverse taps."""
    if w.ndim == 5:
        return np.ascontiguousarray(w.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])
    return np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
