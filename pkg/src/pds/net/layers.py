"""Network building blocks with explicit forward/backward passes.

Every layer registers its parameters in a ParamLayout and reads them from a
flat vector at call time; backward passes accumulate into a gradient vector
of the same layout. Caches returned by fwd() are consumed by bwd().
"""

from __future__ import annotations

import numpy as np

from . import kernels


class ParamLayout:
    """Ordered named slices of a flat parameter vector."""

    def __init__(self):
        self.slots: dict[str, tuple[int, tuple[int, ...]]] = {}
        self.inits: list[tuple[str, tuple]] = []
        self.size = 0

    def add(self, name: str, shape: tuple[int, ...], init: tuple) -> None:
        if name in self.slots:
            raise ValueError(f"duplicate parameter {name}")
        self.slots[name] = (self.size, tuple(shape))
        self.inits.append((name, init))
        self.size += int(np.prod(shape))

    def names(self) -> list[str]:
        return list(self.slots)

    def view(self, flat: np.ndarray, name: str) -> np.ndarray:
        off, shape = self.slots[name]
        return flat[off:off + int(np.prod(shape))].reshape(shape)

    def init_vector(self, seed, dtype=np.float64) -> np.ndarray:
        """Draws happen in registration order, always in float64.

        seed may be an int or a sequence of ints (a derived stream key).
        """
        key = [int(s) for s in seed] if isinstance(seed, (list, tuple)) else [int(seed)]
        rng = np.random.default_rng(np.random.SeedSequence(key))
        flat = np.zeros(self.size, dtype=np.float64)
        for name, init in self.inits:
            view = self.view(flat, name)
            kind = init[0]
            if kind == "zero":
                continue
            if kind == "normal":
                view[...] = rng.normal(0.0, init[1], size=view.shape)
            else:
                raise ValueError(f"unknown init {kind}")
        return flat.astype(dtype)


def silu(x: np.ndarray) -> np.ndarray:
    return x * _sigmoid(x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu_bwd(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    s = _sigmoid(x)
    return dy * (s * (1.0 + x * (1.0 - s)))


class Conv3d:
    """3x3x3 same-padding convolution."""

    def __init__(self, layout: ParamLayout, name: str, c_in: int, c_out: int,
                 zero_init: bool = False):
        self.name = name
        self.c_in = c_in
        self.c_out = c_out
        w_init = ("zero",) if zero_init else ("normal", float(np.sqrt(2.0 / (c_in * 27))))
        layout.add(name + ".w", (c_out, c_in, 3, 3, 3), w_init)
        layout.add(name + ".b", (c_out,), ("zero",))
        self.layout = layout

    def fwd(self, flat, x):
        w = self.layout.view(flat, self.name + ".w")
        b = self.layout.view(flat, self.name + ".b")
        xp = kernels.pad1(x)
        y = np.empty((self.c_out,) + x.shape[1:], dtype=x.dtype)
        kernels.conv3d_fwd(xp, w, b, y)
        return y, xp

    def bwd(self, flat, grad, dy, xp):
        w = self.layout.view(flat, self.name + ".w")
        dw = np.empty_like(w)
        kernels.conv3d_dw(xp, dy, dw)
        self.layout.view(grad, self.name + ".w")[...] += dw
        self.layout.view(grad, self.name + ".b")[...] += dy.sum(axis=(1, 2, 3))
        dyp = kernels.pad1(dy)
        wt = kernels.flip_transpose(w)
        dx = np.empty((self.c_in,) + dy.shape[1:], dtype=dy.dtype)
        kernels.conv3d_fwd(dyp, wt, np.zeros(self.c_in, dtype=dy.dtype), dx)
        return dx


class Conv2d:
    """3x3 same-padding convolution over (C, H, W)."""

    def __init__(self, layout: ParamLayout, name: str, c_in: int, c_out: int):
        self.name = name
        self.c_in = c_in
        self.c_out = c_out
        layout.add(name + ".w", (c_out, c_in, 3, 3), ("normal", float(np.sqrt(2.0 / (c_in * 9)))))
        layout.add(name + ".b", (c_out,), ("zero",))
        self.layout = layout

    def fwd(self, flat, x):
        w = self.layout.view(flat, self.name + ".w")
        b = self.layout.view(flat, self.name + ".b")
        xp = kernels.pad1(x)
        y = np.empty((self.c_out,) + x.shape[1:], dtype=x.dtype)
        kernels.conv2d_fwd(xp, w, b, y)
        return y, xp

    def bwd(self, flat, grad, dy, xp):
        w = self.layout.view(flat, self.name + ".w")
        dw = np.empty_like(w)
        kernels.conv2d_dw(xp, dy, dw)
        self.layout.view(grad, self.name + ".w")[...] += dw
        self.layout.view(grad, self.name + ".b")[...] += dy.sum(axis=(1, 2))
        dyp = kernels.pad1(dy)
        wt = kernels.flip_transpose(w)
        dx = np.empty((self.c_in,) + dy.shape[1:], dtype=dy.dtype)
        kernels.conv2d_fwd(dyp, wt, np.zeros(self.c_in, dtype=dy.dtype), dx)
        return dx


class Film:
    """Per-channel scale/shift from an embedding vector: y = x*(1+s) + h."""

    def __init__(self, layout: ParamLayout, name: str, channels: int, emb_dim: int):
        self.name = name
        self.channels = channels
        layout.add(name + ".ws", (channels, emb_dim), ("zero",))
        layout.add(name + ".bs", (channels,), ("zero",))
        layout.add(name + ".wh", (channels, emb_dim), ("zero",))
        layout.add(name + ".bh", (channels,), ("zero",))
        self.layout = layout

    def fwd(self, flat, x, emb):
        v = self.layout.view
        scale = v(flat, self.name + ".ws") @ emb + v(flat, self.name + ".bs")
        shift = v(flat, self.name + ".wh") @ emb + v(flat, self.name + ".bh")
        bc = (slice(None),) + (None,) * (x.ndim - 1)
        y = x * (1.0 + scale)[bc] + shift[bc]
        return y, (x, scale, emb)

    def bwd(self, flat, grad, dy, cache):
        x, scale, emb = cache
        axes = tuple(range(1, x.ndim))
        dscale = (dy * x).sum(axis=axes)
        dshift = dy.sum(axis=axes)
        g = self.layout.view
        g(grad, self.name + ".ws")[...] += np.outer(dscale, emb)
        g(grad, self.name + ".bs")[...] += dscale
        g(grad, self.name + ".wh")[...] += np.outer(dshift, emb)
        g(grad, self.name + ".bh")[...] += dshift
        bc = (slice(None),) + (None,) * (x.ndim - 1)
        return dy * (1.0 + scale)[bc]


class Attention:
    """Single-head self-attention over flattened spatial positions, with
    residual connection. Output projection starts at zero."""

    def __init__(self, layout: ParamLayout, name: str, channels: int):
        self.name = name
        self.channels = channels
        std = float(np.sqrt(1.0 / channels))
        for part in ("wq", "wk", "wv"):
            layout.add(f"{name}.{part}", (channels, channels), ("normal", std))
            layout.add(f"{name}.{part[1]}b", (channels,), ("zero",))
        layout.add(name + ".wo", (channels, channels), ("zero",))
        layout.add(name + ".ob", (channels,), ("zero",))
        self.layout = layout

    def fwd(self, flat, x):
        shape = x.shape
        xf = x.reshape(self.channels, -1)
        v = self.layout.view
        q = v(flat, self.name + ".wq") @ xf + v(flat, self.name + ".qb")[:, None]
        k = v(flat, self.name + ".wk") @ xf + v(flat, self.name + ".kb")[:, None]
        val = v(flat, self.name + ".wv") @ xf + v(flat, self.name + ".vb")[:, None]
        scores = (q.T @ k) / np.sqrt(self.channels)
        scores -= scores.max(axis=1, keepdims=True)
        attn = np.exp(scores)
        attn /= attn.sum(axis=1, keepdims=True)
        of = val @ attn.T
        y = xf + v(flat, self.name + ".wo") @ of + v(flat, self.name + ".ob")[:, None]
        return y.reshape(shape), (xf, q, k, val, attn, of)

    def bwd(self, flat, grad, dy, cache):
        xf, q, k, val, attn, of = cache
        shape = dy.shape
        dyf = dy.reshape(self.channels, -1)
        v, g = self.layout.view, self.layout.view
        g(grad, self.name + ".wo")[...] += dyf @ of.T
        g(grad, self.name + ".ob")[...] += dyf.sum(axis=1)
        dof = v(flat, self.name + ".wo").T @ dyf
        dval = dof @ attn
        dattn = dof.T @ val  # dattn[i,j] = sum_c dof[c,i] val[c,j]
        dscores = attn * (dattn - (attn * dattn).sum(axis=1, keepdims=True))
        scale = 1.0 / np.sqrt(self.channels)
        dq = (k @ dscores.T) * scale
        dk = (q @ dscores) * scale
        g(grad, self.name + ".wq")[...] += dq @ xf.T
        g(grad, self.name + ".qb")[...] += dq.sum(axis=1)
        g(grad, self.name + ".wk")[...] += dk @ xf.T
        g(grad, self.name + ".kb")[...] += dk.sum(axis=1)
        g(grad, self.name + ".wv")[...] += dval @ xf.T
        g(grad, self.name + ".vb")[...] += dval.sum(axis=1)
        dxf = (dyf
               + v(flat, self.name + ".wq").T @ dq
               + v(flat, self.name + ".wk").T @ dk
               + v(flat, self.name + ".wv").T @ dval)
        return dxf.reshape(shape)


def avg_pool2(x: np.ndarray) -> np.ndarray:
    c = x.shape[0]
    nx, ny, nz = x.shape[1:]
    if nx % 2 or ny % 2 or nz % 2:
        raise ValueError(f"pooling needs even dims, got {x.shape[1:]}")
    return x.reshape(c, nx // 2, 2, ny // 2, 2, nz // 2, 2).mean(axis=(2, 4, 6))


def avg_pool2_bwd(dy: np.ndarray) -> np.ndarray:
    c, nx, ny, nz = dy.shape
    out = np.broadcast_to(dy[:, :, None, :, None, :, None] * dy.dtype.type(0.125),
                          (c, nx, 2, ny, 2, nz, 2))
    return out.reshape(c, nx * 2, ny * 2, nz * 2).copy()


def upsample2(x: np.ndarray) -> np.ndarray:
    c, nx, ny, nz = x.shape
    out = np.broadcast_to(x[:, :, None, :, None, :, None], (c, nx, 2, ny, 2, nz, 2))
    return out.reshape(c, nx * 2, ny * 2, nz * 2).copy()


def upsample2_bwd(dy: np.ndarray) -> np.ndarray:
    c, nx, ny, nz = dy.shape
    return dy.reshape(c, nx // 2, 2, ny // 2, 2, nz // 2, 2).sum(axis=(2, 4, 6))


def avg_pool2_2d(x: np.ndarray) -> np.ndarray:
    c, nx, ny = x.shape
    if nx % 2 or ny % 2:
        raise ValueError(f"pooling needs even dims, got {x.shape[1:]}")
    return x.reshape(c, nx // 2, 2, ny // 2, 2).mean(axis=(2, 4))


def avg_pool2_2d_bwd(dy: np.ndarray) -> np.ndarray:
    c, nx, ny = dy.shape
    out = np.broadcast_to(dy[:, :, None, :, None] * dy.dtype.type(0.25), (c, nx, 2, ny, 2))
    return out.reshape(c, nx * 2, ny * 2).copy()
