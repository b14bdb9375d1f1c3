"""Pattern-aware dual-modal diffusion: the stage-1 objective, its training
loop, and the cross-modal sampling chain.

Direction naming: "d->f" synthesizes the f-modality volume from an observed
d-modality volume, "f->d" the reverse. A suffix _f on a loss component means
the direction whose target modality is f.

Stage-1 wiring per batch member (both directions):
  - both clean volumes are noised to the same sampled level t; with shared
    noise coupling the two modalities reuse one noise realization, which is
    what makes cross-modal noise prediction learnable at all;
  - the noise estimator of each direction consumes the complementary
    modality's noisy volume (resampled when dims differ) and is trained
    against the sampled noise with L1 plus the tri-planar feature loss;
  - the pattern estimator consumes the complementary modality's atlas-masked
    noisy volume and is trained against this direction's masked noisy volume,
    with its prediction masked to the atlas support first, so the objective
    is blind to everything outside the atlas;
  - l_pa restates the two pattern L1 terms (the objective counts them twice
    as written); dedupe_pattern_terms zeroes the duplicate's weight.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np

from .config import (
    DIRECTIONS,
    DataError,
    ConfigError,
    SAMPLE_MODES,
    STAGE1_COMPONENTS,
    Stage1Config,
    resolve_weights,
)
from .manifest import RunManifest, config_hash, new_manifest
from .net import AdamW, ArchConfig, DenoiserNet, PerceptionNet, l1_loss
from .net.checkpoint import load_checkpoint, save_checkpoint
from .schedule import NoiseSchedule, build_schedule, forward_marginal, reverse_step
from .volume import AtlasMask, ModalityPair, Volume3, resample_trilinear

CHECKPOINT_NAME = "checkpoint.pdsc"


class NonFiniteLossError(FloatingPointError):
    """A loss component evaluated to NaN or infinity."""

    def __init__(self, component: str, value: float):
        super().__init__(f"loss component '{component}' is non-finite ({value})")
        self.component = component


class NumericalAbortError(RuntimeError):
    """Training diverged; the last good checkpoint was preserved."""


@dataclass(frozen=True)
class LossBreakdown:
    """Named scalar loss components plus their weighted total."""

    components: dict
    weights: dict
    total: float

    @classmethod
    def build(cls, components: dict, weights: dict) -> "LossBreakdown":
        if set(components) != set(weights):
            raise ValueError("component/weight name sets differ")
        for name, value in components.items():
            if not np.isfinite(value):
                raise NonFiniteLossError(name, value)
        total = 0.0
        for name, value in components.items():
            total += weights[name] * value
        return cls(components=dict(components), weights=dict(weights), total=float(total))


@dataclass(frozen=True)
class PatternPair:
    """Masked noisy volume P_x and its estimate P_n for one direction."""

    p_x: np.ndarray
    p_n: np.ndarray
    direction: str

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.p_x.shape != self.p_n.shape:
            raise ValueError(f"pattern dims differ: {self.p_x.shape} vs {self.p_n.shape}")


@dataclass(frozen=True)
class Stage1Batch:
    """One training example: a modality pair at a sampled noise level."""

    pair: ModalityPair
    t: int
    eps_f: np.ndarray
    eps_d: np.ndarray
    masks: tuple

    def __post_init__(self):
        if self.t < 1:
            raise ValueError(f"t must be >= 1, got {self.t}")
        if self.eps_f.shape != self.pair.f_vol.dims:
            raise ValueError(f"eps_f dims {self.eps_f.shape} do not match f volume {self.pair.f_vol.dims}")
        if self.eps_d.shape != self.pair.d_vol.dims:
            raise ValueError(f"eps_d dims {self.eps_d.shape} do not match d volume {self.pair.d_vol.dims}")
        mask_f, mask_d = self.masks
        if mask_f.dims != self.pair.f_vol.dims or mask_d.dims != self.pair.d_vol.dims:
            raise ValueError("mask dims do not match volume dims")


def _unwrap(x) -> np.ndarray:
    return x.data if isinstance(x, Volume3) else np.asarray(x)


def pattern_project(x_t, mask: AtlasMask):
    """Voxelwise product with the binarized mask (label > 0 -> 1)."""
    arr = _unwrap(x_t)
    if arr.shape != mask.dims:
        raise ValueError(f"volume dims {arr.shape} do not match mask dims {mask.dims}")
    out = arr * mask.binary().astype(arr.dtype)
    return x_t.with_data(out) if isinstance(x_t, Volume3) else out


def pattern_estimate(eps_s: DenoiserNet, x_cross_t, t: int, target_dims=None) -> np.ndarray:
    """Pattern estimate for one direction from the complementary modality's
    masked noisy volume; resampled to target dims when modalities differ."""
    arr = _unwrap(x_cross_t)
    tdims = tuple(target_dims) if target_dims is not None else arr.shape
    cond = resample_trilinear(arr.astype(np.float64), tdims).astype(eps_s.dtype)
    return eps_s.forward(cond, t)


def loss_pa(px_f, pn_f, px_d, pn_d) -> float:
    """Sum of the two directions' mean absolute pattern alignment errors."""
    total = 0.0
    for px, pn, direction in ((px_f, pn_f, "d->f"), (px_d, pn_d, "f->d")):
        a, b = _unwrap(px), _unwrap(pn)
        if a.shape != b.shape:
            raise ValueError(f"{direction} pattern dims differ: {a.shape} vs {b.shape}")
        total += float(np.abs(a - b).mean())
    return total


def build_stage1_nets(arch: ArchConfig, dtype, seed: int,
                      share_pattern_estimator: bool = False) -> dict:
    """The four stage-1 nets; with sharing, each direction's pattern
    estimator is the same object as its noise estimator."""
    nets = {
        "eps_f": DenoiserNet(arch, use_time=True, dtype=dtype, seed=[seed, 10]),
        "eps_d": DenoiserNet(arch, use_time=True, dtype=dtype, seed=[seed, 11]),
    }
    if share_pattern_estimator:
        nets["eps_s_f"] = nets["eps_f"]
        nets["eps_s_d"] = nets["eps_d"]
    else:
        nets["eps_s_f"] = DenoiserNet(arch, use_time=True, dtype=dtype, seed=[seed, 12])
        nets["eps_s_d"] = DenoiserNet(arch, use_time=True, dtype=dtype, seed=[seed, 13])
    return nets


def unique_nets(nets: dict) -> list:
    """(name, net) per distinct net object, first name wins."""
    seen = {}
    for name, net in nets.items():
        if id(net) not in seen:
            seen[id(net)] = (name, net)
    return list(seen.values())


def _stage1_eval(nets: dict, batch: Stage1Batch, sched: NoiseSchedule,
                 M: PerceptionNet, weights: dict, pattern_enabled: bool,
                 grads: dict | None) -> dict:
    from .refine import loss_mic_and_grad

    t = sched._check_t(batch.t)
    mask_f, mask_d = batch.masks
    x_f0 = batch.pair.f_vol.data
    x_d0 = batch.pair.d_vol.data
    x_f_t = forward_marginal(x_f0, t, batch.eps_f, sched)
    x_d_t = forward_marginal(x_d0, t, batch.eps_d, sched)
    comps = {name: 0.0 for name in STAGE1_COMPONENTS}

    def noise_direction(net_name: str, cond_src: np.ndarray, eps_target: np.ndarray, sfx: str):
        net = nets[net_name]
        cond = resample_trilinear(np.asarray(cond_src, dtype=np.float64),
                                  eps_target.shape).astype(net.dtype)
        target = eps_target.astype(net.dtype)
        pred, tape = net.forward_and_tape(cond, t)
        l1, dl1 = l1_loss(pred, target)
        mic, dmic = loss_mic_and_grad(M, pred, target)
        comps[f"noise_l1_{sfx}"] = l1
        comps[f"noise_mic_{sfx}"] = mic
        if grads is not None:
            dy = weights[f"noise_l1_{sfx}"] * dl1 + weights[f"noise_mic_{sfx}"] * dmic
            net.backward(tape, dy.astype(net.dtype), grads[net_name])

    noise_direction("eps_f", x_d_t, batch.eps_f, "f")
    noise_direction("eps_d", x_f_t, batch.eps_d, "d")

    if pattern_enabled:
        px_f = pattern_project(x_f_t, mask_f)
        px_d = pattern_project(x_d_t, mask_d)

        def pattern_direction(net_name: str, cross_px: np.ndarray, own_px: np.ndarray,
                              own_mask: AtlasMask, direction: str, sfx: str):
            net = nets[net_name]
            cond = resample_trilinear(np.asarray(cross_px, dtype=np.float64),
                                      own_px.shape).astype(net.dtype)
            support = own_mask.binary().astype(net.dtype)
            raw, tape = net.forward_and_tape(cond, t)
            pp = PatternPair(p_x=own_px.astype(net.dtype), p_n=raw * support,
                             direction=direction)
            l1, dl1 = l1_loss(pp.p_n, pp.p_x)
            mic, dmic = loss_mic_and_grad(M, pp.p_n, pp.p_x)
            comps[f"pattern_l1_{sfx}"] = l1
            comps[f"pattern_mic_{sfx}"] = mic
            if grads is not None:
                w_l1 = weights[f"pattern_l1_{sfx}"] + weights["l_pa"]
                dy = (w_l1 * dl1 + weights[f"pattern_mic_{sfx}"] * dmic) * support
                net.backward(tape, dy.astype(net.dtype), grads[net_name])

        pattern_direction("eps_s_f", px_d, px_f, mask_f, "d->f", "f")
        pattern_direction("eps_s_d", px_f, px_d, mask_d, "f->d", "d")
        comps["l_pa"] = comps["pattern_l1_f"] + comps["pattern_l1_d"]
    return comps


def _stage1_weights(weights: dict | None, dedupe_pattern_terms: bool) -> dict:
    w = resolve_weights(weights, STAGE1_COMPONENTS)
    if dedupe_pattern_terms:
        w["l_pa"] = 0.0
    return w


def stage1_loss(nets: dict, batch: Stage1Batch, sched: NoiseSchedule, M: PerceptionNet,
                weights: dict | None = None, pattern_enabled: bool = True,
                dedupe_pattern_terms: bool = False) -> LossBreakdown:
    w = _stage1_weights(weights, dedupe_pattern_terms)
    comps = _stage1_eval(nets, batch, sched, M, w, pattern_enabled, grads=None)
    return LossBreakdown.build(comps, w)


def stage1_loss_and_grads(nets: dict, batch: Stage1Batch, sched: NoiseSchedule,
                          M: PerceptionNet, grads: dict,
                          weights: dict | None = None, pattern_enabled: bool = True,
                          dedupe_pattern_terms: bool = False) -> LossBreakdown:
    """Like stage1_loss, accumulating d(total)/d(params) into grads[name]
    per net; shared nets must alias the same gradient array."""
    w = _stage1_weights(weights, dedupe_pattern_terms)
    comps = _stage1_eval(nets, batch, sched, M, w, pattern_enabled, grads=grads)
    return LossBreakdown.build(comps, w)


def _training_state(named: list, opts: dict, it: int) -> dict:
    arrays = {"meta/iter": np.array([float(it)])}
    for name, net in named:
        arrays[f"net.{name}/params"] = net.params
        state = opts[name].state_arrays()
        arrays[f"opt.{name}/m"] = state["opt/m"]
        arrays[f"opt.{name}/v"] = state["opt/v"]
        arrays[f"opt.{name}/step"] = state["opt/step"]
    return arrays


def _load_training_state(named: list, opts: dict, arrays: dict) -> int:
    for name, net in named:
        key = f"net.{name}/params"
        if key not in arrays:
            raise DataError(f"checkpoint is missing entry {key}")
        params = arrays[key].astype(net.dtype)
        if params.size != net.params.size:
            raise DataError(f"checkpoint entry {key} has {params.size} values, net expects {net.params.size}")
        net.params = params
        opts[name].load_state({"opt/m": arrays[f"opt.{name}/m"],
                               "opt/v": arrays[f"opt.{name}/v"],
                               "opt/step": arrays[f"opt.{name}/step"]})
    return int(arrays["meta/iter"][0])


def resume_training_state(out_dir: str, cfg_dict: dict, command: str):
    """(manifest, checkpoint arrays) for an out_dir that already holds this
    exact run, (None, None) for a fresh dir; a different run is refused."""
    if not os.path.exists(os.path.join(out_dir, "manifest.json")):
        return None, None
    man = RunManifest.load(out_dir)
    if man.command != command:
        raise ConfigError(f"output dir {out_dir} holds a '{man.command}' run, not '{command}'")
    if man.config_hash != config_hash(cfg_dict):
        raise ConfigError(f"output dir {out_dir} already holds run {man.run_id} "
                          "with a different config; refusing to overwrite")
    ckpt_path = man.checkpoints.get("latest")
    if not ckpt_path or not os.path.exists(ckpt_path):
        return man, None
    return man, load_checkpoint(ckpt_path)


def train_stage1(dataset: list, masks: tuple, cfg: Stage1Config):
    """Train the four stage-1 nets on modality pairs; returns (nets, manifest).

    Deterministic for a fixed config: iteration i draws everything it needs
    from a stream keyed by (seed, i), so a resumed run replays the exact
    draws of an uninterrupted one. Non-finite loss aborts, preserving the
    last checkpoint on disk.
    """
    if not dataset:
        raise DataError("train_stage1 needs a non-empty dataset")
    t_start = time.monotonic()
    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    sched = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end, cfg.sigma_rule)
    arch = ArchConfig.from_dict(cfg.arch)
    nets = build_stage1_nets(arch, dtype, cfg.seed, cfg.share_pattern_estimator)
    M = PerceptionNet(seed=cfg.perception_seed, dtype=dtype)
    named = unique_nets(nets)
    opts = {name: AdamW(net.params.size, lr=cfg.lr, weight_decay=cfg.weight_decay,
                        dtype=dtype) for name, net in named}
    grad_arrays = {name: np.zeros(net.params.size, dtype=dtype) for name, net in named}
    grads = {name: grad_arrays[_canonical_name(nets, named, name)] for name in nets}
    weights = _stage1_weights(cfg.weights, cfg.dedupe_pattern_terms)
    mask_f, mask_d = masks
    cfg_dict = cfg.to_dict()
    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt_path = os.path.join(cfg.out_dir, CHECKPOINT_NAME)

    trace_keys = (*STAGE1_COMPONENTS, "total")
    man, ckpt = resume_training_state(cfg.out_dir, cfg_dict, "train-stage1")
    trace = {key: [] for key in trace_keys}
    start = 0
    if man is None:
        man = new_manifest(
            "train-stage1", cfg_dict, seeds={"root": cfg.seed},
            schedule={"T": cfg.T, "beta_start": cfg.beta_start,
                      "beta_end": cfg.beta_end, "sigma_rule": cfg.sigma_rule,
                      "noise_index_range": [1, cfg.T],
                      "two_t_denoise_range": [cfg.T + 1, 2 * cfg.T]},
            extra={"dims_f": list(dataset[0].f_vol.dims),
                   "dims_d": list(dataset[0].d_vol.dims),
                   "n_pairs": len(dataset),
                   "net_names": [name for name, _ in named],
                   "activation": "silu",
                   "share_pattern_estimator": cfg.share_pattern_estimator})
    elif ckpt is not None:
        start = _load_training_state(named, opts, ckpt)
        if man.status == "complete" and start >= cfg.iters:
            return nets, man
        trace = {key: list(man.loss_trace.get(key, []))[:start] for key in trace_keys}
    prior_wall = man.wall_clock_s

    def save_state(it: int, status: str):
        save_checkpoint(ckpt_path, _training_state(named, opts, it))
        man.checkpoints["latest"] = ckpt_path
        man.loss_trace = trace
        man.iters_done = it
        man.status = status
        man.wall_clock_s = prior_wall + (time.monotonic() - t_start)
        man.save(cfg.out_dir)

    for it in range(start, cfg.iters):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3, it]))
        for arr in grad_arrays.values():
            arr.fill(0)
        comp_sums = {key: 0.0 for key in trace_keys}
        try:
            for _ in range(cfg.batch_size):
                pair = dataset[int(rng.integers(0, len(dataset)))]
                t = int(rng.integers(1, cfg.T + 1))
                eps_f = rng.standard_normal(pair.f_vol.dims)
                if cfg.noise_coupling == "shared" and pair.d_vol.dims == pair.f_vol.dims:
                    eps_d = eps_f
                else:
                    eps_d = rng.standard_normal(pair.d_vol.dims)
                batch = Stage1Batch(pair=pair, t=t, eps_f=eps_f, eps_d=eps_d,
                                    masks=(mask_f, mask_d))
                bd = stage1_loss_and_grads(nets, batch, sched, M, grads,
                                           weights=weights,
                                           pattern_enabled=cfg.pattern_enabled)
                for key, value in bd.components.items():
                    comp_sums[key] += value
                comp_sums["total"] += bd.total
        except NonFiniteLossError as exc:
            man.loss_trace = trace
            man.status = "aborted"
            man.extra["aborted_at_iter"] = it
            man.extra["abort_reason"] = str(exc)
            man.wall_clock_s = prior_wall + (time.monotonic() - t_start)
            man.save(cfg.out_dir)
            raise NumericalAbortError(f"stage-1 iteration {it}: {exc}") from exc
        inv_b = 1.0 / cfg.batch_size
        for arr in grad_arrays.values():
            arr *= inv_b
        for name, net in named:
            opts[name].step(net.params, grad_arrays[name])
        for key in trace_keys:
            trace[key].append(comp_sums[key] * inv_b)
        if (it + 1) % cfg.checkpoint_every == 0 or it + 1 == cfg.iters:
            save_state(it + 1, "complete" if it + 1 == cfg.iters else "running")
    if cfg.iters == start:
        save_state(cfg.iters, "complete")
    return nets, man


def _canonical_name(nets: dict, named: list, name: str) -> str:
    for uname, net in named:
        if net is nets[name]:
            return uname
    raise KeyError(name)


def _seed_key(seed) -> list:
    if isinstance(seed, (list, tuple)):
        return [int(s) for s in seed]
    return [int(seed)]


def sample_chain(predict_fn, dims, sched: NoiseSchedule, seed,
                 mode: str = "stochastic", dtype=np.float64) -> np.ndarray:
    """Generic reverse chain: x_T ~ N(0, I), then T reverse steps driven by
    predict_fn(x_chain, t) -> noise estimate. Stochastic mode injects fresh
    z per step except the last; mean mode never does. Unclamped output."""
    if mode not in SAMPLE_MODES:
        raise ValueError(f"mode must be one of {SAMPLE_MODES}, got {mode!r}")
    dims = tuple(dims)
    key = _seed_key(seed)
    dtype = np.dtype(dtype)
    x = np.random.default_rng(np.random.SeedSequence(key + [0])).standard_normal(dims).astype(dtype)
    zeros = np.zeros(dims, dtype=dtype)
    for t in range(sched.T, 0, -1):
        eps_hat = np.asarray(predict_fn(x, t))
        if mode == "stochastic" and t > 1:
            z = np.random.default_rng(np.random.SeedSequence(key + [2, t])).standard_normal(dims).astype(dtype)
        else:
            z = zeros
        x = reverse_step(x, eps_hat, t, z, sched).astype(dtype, copy=False)
    return x


def sample_pair(nets: dict, source, direction: str, sched: NoiseSchedule, seed,
                mode: str = "stochastic", target_dims=None):
    """Synthesize the target modality from one observed source volume.

    The clean source is re-noised to each level t (the conditioning the nets
    saw in training), resampled to target dims when the modalities differ,
    and fed to the target direction's noise estimator. Output is clamped to
    [0, 1]; a Volume3 source yields a Volume3 with its spacing.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    net_name = "eps_f" if direction == "d->f" else "eps_d"
    net = nets.get(net_name)
    if net is None:
        raise ValueError(f"nets dict is missing '{net_name}' for direction {direction}")
    ref = source if isinstance(source, Volume3) else None
    src = np.asarray(_unwrap(source), dtype=np.float64)
    tdims = tuple(target_dims) if target_dims is not None else src.shape
    key = _seed_key(seed)

    def predict(_x_chain: np.ndarray, t: int) -> np.ndarray:
        noise = np.random.default_rng(np.random.SeedSequence(key + [1, t])).standard_normal(src.shape)
        src_t = forward_marginal(src, t, noise, sched)
        cond = resample_trilinear(src_t, tdims).astype(net.dtype)
        return net.forward(cond, t)

    x0 = sample_chain(predict, tdims, sched, seed, mode, dtype=net.dtype)
    out = np.clip(x0.astype(np.float64), 0.0, 1.0)
    if ref is not None:
        return Volume3(tdims, ref.spacing, out)
    return out

def load_stage1(stage1_dir: str):
    """Rebuild the trained stage-1 nets from a run directory.

    Returns (nets, sched, manifest); net params come from the latest
    checkpoint, so a still-running run loads at its last saved iteration.
    """
    man = RunManifest.load(stage1_dir)
    if man.command != "train-stage1":
        raise DataError(f"{stage1_dir} holds a '{man.command}' run, not 'train-stage1'")
    ckpt_path = man.checkpoints.get("latest")
    if not ckpt_path or not os.path.exists(ckpt_path):
        raise DataError(f"{stage1_dir} has no saved checkpoint")
    cfg = man.config
    dtype = np.float32 if cfg["dtype"] == "float32" else np.float64
    nets = build_stage1_nets(ArchConfig.from_dict(cfg["arch"]), dtype, cfg["seed"],
                             cfg["share_pattern_estimator"])
    arrays = load_checkpoint(ckpt_path)
    for name, net in unique_nets(nets):
        key = f"net.{name}/params"
        if key not in arrays:
            raise DataError(f"checkpoint {ckpt_path} is missing {key}")
        if arrays[key].size != net.params.size:
            raise DataError(f"checkpoint {ckpt_path} entry {key} has "
                            f"{arrays[key].size} params, net expects {net.params.size}")
        net.params[:] = arrays[key].astype(dtype)
    sched = build_schedule(man.schedule["T"], man.schedule["beta_start"],
                           man.schedule["beta_end"], man.schedule["sigma_rule"])
    return nets, sched, man
