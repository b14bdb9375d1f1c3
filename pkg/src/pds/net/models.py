"""Network definitions: denoiser/projector encoder-decoder, refinement
backbone, and the frozen perception feature extractor.

Architecture at a glance (DenoiserNet, widths [w0..wL]):

    stem conv -> [level i: res units, skip save, pool + channel conv] ...
    bottleneck res units (+ optional single-head attention)
    ... [level i: channel conv at coarse res, nearest upsample, add skip,
    res units] -> SiLU -> zero-initialized head conv

A residual unit is x + SiLU(FiLM(conv(x))) when time conditioning is on,
x + SiLU(conv(x)) otherwise. The projector used by the refinement stage is
the same grammar without time conditioning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from .layers import Attention, Conv2d, Conv3d, Film, ParamLayout


@dataclass(frozen=True)
class ArchConfig:
    widths: tuple[int, ...] = (8, 16, 32)
    res_units: int = 1
    time_dim: int = 16
    attention: bool = False

    def __post_init__(self):
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError(f"bad widths {self.widths}")
        if self.res_units < 0:
            raise ValueError("res_units must be >= 0")
        if self.time_dim < 2 or self.time_dim % 2:
            raise ValueError("time_dim must be even and >= 2")

    @classmethod
    def from_dict(cls, doc: dict) -> "ArchConfig":
        known = ("widths", "res_units", "time_dim", "attention")
        unknown = set(doc) - set(known)
        if unknown:
            raise ValueError(f"unknown arch keys {sorted(unknown)}")
        doc = dict(doc)
        if "widths" in doc:
            doc["widths"] = tuple(int(w) for w in doc["widths"])
        return cls(**doc)

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "res_units": self.res_units,
                "time_dim": self.time_dim, "attention": self.attention}


def time_embed(t: float, dim: int) -> np.ndarray:
    """Sinusoidal step embedding: [sin(t w_i)..., cos(t w_i)...]."""
    dim = int(dim)
    if dim < 2 or dim % 2:
        raise ValueError("embedding dim must be even and >= 2")
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = float(t) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


class DenoiserNet:
    """Encoder-decoder volume-to-volume network, optionally time-conditioned.

    forward() accepts a (nx, ny, nz) array and returns the same shape; the
    spatial dims must be divisible by 2**(levels - 1). Parameters live in a
    flat float vector with named slices.
    """

    def __init__(self, arch: ArchConfig = ArchConfig(), use_time: bool = True,
                 dtype=np.float64, seed: int = 0):
        self.arch = arch
        self.use_time = use_time
        self.dtype = np.dtype(dtype)
        self.layout = ParamLayout()
        self.steps = self._build(arch)
        self.params = self.layout.init_vector(seed, self.dtype)

    def _build(self, arch: ArchConfig) -> list[tuple]:
        lo, widths = self.layout, arch.widths
        levels = len(widths)
        steps: list[tuple] = [("conv", Conv3d(lo, "stem", 1, widths[0]))]

        def res_block(tag: str, ch: int):
            for u in range(arch.res_units):
                name = f"{tag}.res{u}"
                steps.append(("res_begin",))
                steps.append(("conv", Conv3d(lo, name + ".conv", ch, ch)))
                if self.use_time:
                    steps.append(("film", Film(lo, name + ".film", ch, arch.time_dim)))
                steps.append(("silu",))
                steps.append(("res_end",))

        for i in range(levels - 1):
            res_block(f"enc{i}", widths[i])
            steps.append(("skip_save", i))
            steps.append(("pool",))
            steps.append(("conv", Conv3d(lo, f"down{i}", widths[i], widths[i + 1])))
        res_block("mid", widths[-1])
        if arch.attention:
            steps.append(("attn", Attention(lo, "attn", widths[-1])))
        for i in range(levels - 2, -1, -1):
            steps.append(("conv", Conv3d(lo, f"up{i}", widths[i + 1], widths[i])))
            steps.append(("upsample",))
            steps.append(("skip_add", i))
            res_block(f"dec{i}", widths[i])
        steps.append(("silu",))
        steps.append(("conv", Conv3d(lo, "head", widths[0], 1, zero_init=True)))
        return steps

    @property
    def param_count(self) -> int:
        return self.layout.size

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 3:
            raise ValueError(f"expected a 3D volume, got shape {x.shape}")
        div = 2 ** (len(self.arch.widths) - 1)
        if any(n % div for n in x.shape):
            raise ValueError(f"dims {x.shape} not divisible by {div} for {len(self.arch.widths)} levels")
        return x

    def forward_and_tape(self, x: np.ndarray, t: float | None = None):
        x = self._check_input(x)
        if self.use_time:
            if t is None:
                raise ValueError("time-conditioned net needs t")
            emb = time_embed(t, self.arch.time_dim).astype(self.dtype)
        else:
            emb = None
        h = x[None]
        tape: list = []
        res_stack: list = []
        skips: dict[int, np.ndarray] = {}
        for step in self.steps:
            kind = step[0]
            if kind == "conv":
                h, cache = step[1].fwd(self.params, h)
                tape.append(cache)
            elif kind == "film":
                h, cache = step[1].fwd(self.params, h, emb)
                tape.append(cache)
            elif kind == "attn":
                h, cache = step[1].fwd(self.params, h)
                tape.append(cache)
            elif kind == "silu":
                tape.append(h)
                h = layers.silu(h)
            elif kind == "res_begin":
                res_stack.append(h)
                tape.append(None)
            elif kind == "res_end":
                h = h + res_stack.pop()
                tape.append(None)
            elif kind == "pool":
                tape.append(None)
                h = layers.avg_pool2(h)
            elif kind == "upsample":
                tape.append(None)
                h = layers.upsample2(h)
            elif kind == "skip_save":
                skips[step[1]] = h
                tape.append(None)
            elif kind == "skip_add":
                h = h + skips[step[1]]
                tape.append(None)
            else:
                raise AssertionError(kind)
        return h[0], tape

    def forward(self, x: np.ndarray, t: float | None = None) -> np.ndarray:
        return self.forward_and_tape(x, t)[0]

    def backward(self, tape: list, dy: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients into grad; return d(loss)/d(input)."""
        dh = np.asarray(dy, dtype=self.dtype)[None]
        res_stack: list = []
        skip_grads: dict[int, np.ndarray] = {}
        for step, cache in zip(reversed(self.steps), reversed(tape)):
            kind = step[0]
            if kind in ("conv", "film", "attn"):
                dh = step[1].bwd(self.params, grad, dh, cache)
            elif kind == "silu":
                dh = layers.silu_bwd(cache, dh)
            elif kind == "res_end":
                res_stack.append(dh)
            elif kind == "res_begin":
                dh = dh + res_stack.pop()
            elif kind == "pool":
                dh = layers.avg_pool2_bwd(dh)
            elif kind == "upsample":
                dh = layers.upsample2_bwd(dh)
            elif kind == "skip_add":
                skip_grads[step[1]] = dh
            elif kind == "skip_save":
                dh = dh + skip_grads[step[1]]
        return dh[0]


class BackboneNet:
    """Two-conv refinement backbone; final conv starts at zero."""

    def __init__(self, channels: int = 8, dtype=np.float64, seed: int = 0):
        self.channels = channels
        self.dtype = np.dtype(dtype)
        self.layout = ParamLayout()
        self.c1 = Conv3d(self.layout, "c1", 1, channels)
        self.c2 = Conv3d(self.layout, "c2", channels, 1, zero_init=True)
        self.params = self.layout.init_vector(seed, self.dtype)

    @property
    def param_count(self) -> int:
        return self.layout.size

    def forward_and_tape(self, x: np.ndarray, t=None):
        x = np.asarray(x, dtype=self.dtype)
        h1, cache1 = self.c1.fwd(self.params, x[None])
        a = layers.silu(h1)
        y, cache2 = self.c2.fwd(self.params, a)
        return y[0], (cache1, h1, cache2)

    def forward(self, x: np.ndarray, t=None) -> np.ndarray:
        return self.forward_and_tape(x)[0]

    def backward(self, tape, dy: np.ndarray, grad: np.ndarray) -> np.ndarray:
        cache1, h1, cache2 = tape
        da = self.c2.bwd(self.params, grad, np.asarray(dy, dtype=self.dtype)[None], cache2)
        dh1 = layers.silu_bwd(h1, da)
        return self.c1.bwd(self.params, grad, dh1, cache1)[0]


@dataclass(eq=False)
class RefineNets:
    """Stage-2 pair: backbone over the generated volume plus projector over
    the observed source; refined = backbone(gen) + projector(source)."""

    backbone: BackboneNet
    projector: DenoiserNet

    @classmethod
    def build(cls, backbone_channels: int = 8, arch: ArchConfig = ArchConfig(),
              dtype=np.float64, seed: int = 0) -> "RefineNets":
        return cls(
            backbone=BackboneNet(backbone_channels, dtype=dtype, seed=seed),
            projector=DenoiserNet(arch, use_time=False, dtype=dtype, seed=seed + 1),
        )

    @property
    def param_count(self) -> int:
        return self.backbone.param_count + self.projector.param_count


class PerceptionNet:
    """Frozen random-weight 2D feature extractor for the microstructure loss.

    Three conv stages with 2x average pooling after the first two; input is
    a (3, S, S) plane stack with S divisible by 4; output is a flat feature
    vector. Weights are fixed at construction and never trained.
    """

    def __init__(self, widths: tuple[int, int, int] = (8, 16, 32),
                 seed: int = 1234, dtype=np.float64):
        self.widths = tuple(widths)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.layout = ParamLayout()
        self.convs = []
        c_in = 3
        for i, w in enumerate(self.widths):
            self.convs.append(Conv2d(self.layout, f"p{i}", c_in, w))
            c_in = w
        self.params = self.layout.init_vector(seed, self.dtype)
        self.params.setflags(write=False)

    @property
    def param_count(self) -> int:
        return self.layout.size

    def forward_and_tape(self, img: np.ndarray):
        h = np.asarray(img, dtype=self.dtype)
        if h.ndim != 3 or h.shape[0] != 3:
            raise ValueError(f"expected (3, S, S) plane stack, got {h.shape}")
        if h.shape[1] % 4 or h.shape[2] % 4:
            raise ValueError(f"plane dims {h.shape[1:]} must be divisible by 4")
        tape = []
        for i, conv in enumerate(self.convs):
            h, cache = conv.fwd(self.params, h)
            tape.append((cache, h))
            h = layers.silu(h)
            if i < len(self.convs) - 1:
                h = layers.avg_pool2_2d(h)
        return h.reshape(-1), tape

    def forward(self, img: np.ndarray) -> np.ndarray:
        return self.forward_and_tape(img)[0]

    def backward_input(self, tape, dfeat: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. the input planes; frozen weights get no gradient."""
        grad_sink = np.zeros(self.layout.size, dtype=self.dtype)
        cache, pre = tape[-1]
        dh = np.asarray(dfeat, dtype=self.dtype).reshape(pre.shape)
        for i in range(len(self.convs) - 1, -1, -1):
            cache, pre = tape[i]
            if i < len(self.convs) - 1:
                dh = layers.avg_pool2_2d_bwd(dh)
            dh = layers.silu_bwd(pre, dh)
            dh = self.convs[i].bwd(self.params, grad_sink, dh, cache)
        return dh
