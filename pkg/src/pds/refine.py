"""Stage-2 tissue refinement and the tri-planar microstructure loss.

The microstructure loss collapses a volume to its three axis-mean planes,
zero-pads them to a shared square, stacks them as channels, and compares
frozen perception-net features with L1. The tissue refinement output is the
voxelwise sum of a backbone pass over the stage-1 generation and a projector
pass over the observed source volume.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np

from .config import (
    DataError,
    STAGE2_COMPONENTS,
    Stage2Config,
    resolve_weights,
)
from .manifest import RunManifest, new_manifest
from .net import AdamW, ArchConfig, PerceptionNet, RefineNets, l1_loss
from .net.checkpoint import load_checkpoint, save_checkpoint
from .pdm import (
    CHECKPOINT_NAME,
    LossBreakdown,
    NonFiniteLossError,
    NumericalAbortError,
    _load_training_state,
    _training_state,
    resume_training_state,
    sample_pair,
)
from .schedule import NoiseSchedule
from .volume import Volume3, resample_trilinear


@dataclass(frozen=True)
class TriPlanes:
    """Axis-mean projections of one volume."""

    axial_map: np.ndarray
    sagittal_map: np.ndarray
    coronal_map: np.ndarray


def _unwrap(x) -> np.ndarray:
    return x.data if isinstance(x, Volume3) else np.asarray(x)


def tri_planar_means(vol) -> TriPlanes:
    arr = _unwrap(vol)
    if arr.ndim != 3 or 0 in arr.shape:
        raise ValueError(f"expected a non-empty 3D volume, got shape {arr.shape}")
    return TriPlanes(axial_map=arr.mean(axis=2),
                     sagittal_map=arr.mean(axis=0),
                     coronal_map=arr.mean(axis=1))


def plane_stack(planes: TriPlanes) -> np.ndarray:
    """(3, S, S) channel stack, each map zero-padded bottom/right to the
    next multiple of 4 covering every map dimension."""
    maps = (planes.axial_map, planes.sagittal_map, planes.coronal_map)
    side = max(max(m.shape) for m in maps)
    side = ((side + 3) // 4) * 4
    out = np.zeros((3, side, side), dtype=np.result_type(*maps))
    for c, m in enumerate(maps):
        out[c, :m.shape[0], :m.shape[1]] = m
    return out


def loss_mic(M: PerceptionNet, gen, tar) -> float:
    """L1 distance between perception features of the two tri-plane stacks."""
    return loss_mic_and_grad(M, gen, tar)[0]


def loss_mic_and_grad(M: PerceptionNet, gen, tar):
    """(value, d value / d gen-volume); the perception net stays frozen."""
    g = _unwrap(gen)
    r = _unwrap(tar)
    if g.shape != r.shape:
        raise ValueError(f"volume dims differ: {g.shape} vs {r.shape}")
    stack_g = plane_stack(tri_planar_means(g)).astype(M.dtype)
    stack_r = plane_stack(tri_planar_means(r)).astype(M.dtype)
    feat_g, tape = M.forward_and_tape(stack_g)
    feat_r = M.forward(stack_r)
    value, dfeat = l1_loss(feat_g, feat_r)
    dstack = M.backward_input(tape, dfeat)
    nx, ny, nz = g.shape
    dgen = (dstack[0, :nx, :ny, None] / nz
            + dstack[1, None, :ny, :nz] / nx
            + dstack[2, :nx, None, :nz] / ny)
    return value, dgen.astype(g.dtype, copy=False)


def tissue_forward(nets: RefineNets, gen, source):
    """B(gen) + U(source); the source is resampled to gen dims if needed."""
    g = _unwrap(gen)
    s = resample_trilinear(np.asarray(_unwrap(source), dtype=np.float64), g.shape)
    dtype = nets.backbone.dtype
    out = (nets.backbone.forward(g.astype(dtype))
           + nets.projector.forward(s.astype(dtype)))
    if isinstance(gen, Volume3):
        return gen.with_data(out.astype(np.float64))
    return out


def _stage2_eval(nets: RefineNets, M: PerceptionNet, gen_f, gen_d, src_f, src_d,
                 tar_f, tar_d, weights: dict, grads: dict | None) -> dict:
    comps = {name: 0.0 for name in STAGE2_COMPONENTS}
    dtype = nets.backbone.dtype

    def direction(gen, cross_src, tar, sfx: str):
        g = _unwrap(gen).astype(dtype)
        s = resample_trilinear(np.asarray(_unwrap(cross_src), dtype=np.float64),
                               g.shape).astype(dtype)
        r = _unwrap(tar).astype(dtype)
        if r.shape != g.shape:
            raise ValueError(f"target dims {r.shape} do not match generated dims {g.shape}")
        b_out, tape_b = nets.backbone.forward_and_tape(g)
        u_out, tape_u = nets.projector.forward_and_tape(s)
        refined = b_out + u_out
        l1, dl1 = l1_loss(refined, r)
        mic, dmic = loss_mic_and_grad(M, refined, r)
        comps[f"tis_l1_{sfx}"] = l1
        comps[f"tis_mic_{sfx}"] = mic
        if grads is not None:
            w_mic = weights[f"tis_mic_{sfx}"] + weights["l_mic"]
            dy = (weights[f"tis_l1_{sfx}"] * dl1 + w_mic * dmic).astype(dtype)
            nets.backbone.backward(tape_b, dy, grads["backbone"])
            nets.projector.backward(tape_u, dy, grads["projector"])

    direction(gen_f, src_d, tar_f, "f")
    direction(gen_d, src_f, tar_d, "d")
    comps["l_mic"] = comps["tis_mic_f"] + comps["tis_mic_d"]
    return comps


def _stage2_weights(weights: dict | None, dedupe_mic_term: bool) -> dict:
    w = resolve_weights(weights, STAGE2_COMPONENTS)
    if dedupe_mic_term:
        w["l_mic"] = 0.0
    return w


def stage2_loss(nets: RefineNets, M: PerceptionNet, gen_f, gen_d, src_f, src_d,
                tar_f, tar_d, weights: dict | None = None,
                dedupe_mic_term: bool = False) -> LossBreakdown:
    w = _stage2_weights(weights, dedupe_mic_term)
    comps = _stage2_eval(nets, M, gen_f, gen_d, src_f, src_d, tar_f, tar_d, w, grads=None)
    return LossBreakdown.build(comps, w)


def stage2_loss_and_grads(nets: RefineNets, M: PerceptionNet, gen_f, gen_d,
                          src_f, src_d, tar_f, tar_d, grads: dict,
                          weights: dict | None = None,
                          dedupe_mic_term: bool = False) -> LossBreakdown:
    w = _stage2_weights(weights, dedupe_mic_term)
    comps = _stage2_eval(nets, M, gen_f, gen_d, src_f, src_d, tar_f, tar_d, w, grads=grads)
    return LossBreakdown.build(comps, w)


def precompute_generations(stage1_nets: dict, dataset: list, sched: NoiseSchedule,
                           seed: int, mode: str) -> list:
    """Stage-1 synthesized (gen_f, gen_d) per pair, with per-pair derived
    seeds so the set is reproducible as a whole."""
    gens = []
    for i, pair in enumerate(dataset):
        gen_f = sample_pair(stage1_nets, pair.d_vol, "d->f", sched,
                            seed=[seed, 4, i, 0], mode=mode,
                            target_dims=pair.f_vol.dims)
        gen_d = sample_pair(stage1_nets, pair.f_vol, "f->d", sched,
                            seed=[seed, 4, i, 1], mode=mode,
                            target_dims=pair.d_vol.dims)
        gens.append((gen_f, gen_d))
    return gens


def train_stage2(stage1_nets: dict, rnets: RefineNets, dataset: list,
                 cfg: Stage2Config, sched: NoiseSchedule):
    """Train the refinement pair on frozen stage-1 generations; returns
    (rnets, manifest). Same determinism and abort contract as stage 1."""
    if not dataset:
        raise DataError("train_stage2 needs a non-empty dataset")
    t_start = time.monotonic()
    dtype = nets_dtype = rnets.backbone.dtype
    M = PerceptionNet(seed=cfg.perception_seed, dtype=dtype)
    named = [("backbone", rnets.backbone), ("projector", rnets.projector)]
    opts = {name: AdamW(net.params.size, lr=cfg.lr, weight_decay=cfg.weight_decay,
                        dtype=nets_dtype) for name, net in named}
    grad_arrays = {name: np.zeros(net.params.size, dtype=nets_dtype) for name, net in named}
    weights = _stage2_weights(cfg.weights, cfg.dedupe_mic_term)
    cfg_dict = cfg.to_dict()
    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt_path = os.path.join(cfg.out_dir, CHECKPOINT_NAME)

    gens = precompute_generations(stage1_nets, dataset, sched, cfg.seed, cfg.sample_mode)

    trace_keys = (*STAGE2_COMPONENTS, "total")
    man, ckpt = resume_training_state(cfg.out_dir, cfg_dict, "train-stage2")
    trace = {key: [] for key in trace_keys}
    start = 0
    if man is None:
        man = new_manifest(
            "train-stage2", cfg_dict, seeds={"root": cfg.seed},
            schedule={"T": sched.T, "beta_start": float(sched.beta[0]),
                      "beta_end": float(sched.beta[-1]), "sigma_rule": sched.sigma_rule,
                      "noise_index_range": [1, sched.T],
                      "two_t_denoise_range": [sched.T + 1, 2 * sched.T]},
            extra={"stage1_dir": cfg.stage1_dir,
                   "dims_f": list(dataset[0].f_vol.dims),
                   "dims_d": list(dataset[0].d_vol.dims),
                   "n_pairs": len(dataset),
                   "sample_mode": cfg.sample_mode,
                   "activation": "silu",
                   "gen_seed_scheme": "[seed, 4, pair_index, direction_index]"})
    elif ckpt is not None:
        start = _load_training_state(named, opts, ckpt)
        if man.status == "complete" and start >= cfg.iters:
            return rnets, man
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
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 5, it]))
        for arr in grad_arrays.values():
            arr.fill(0)
        comp_sums = {key: 0.0 for key in trace_keys}
        try:
            for _ in range(cfg.batch_size):
                i = int(rng.integers(0, len(dataset)))
                pair = dataset[i]
                gen_f, gen_d = gens[i]
                bd = stage2_loss_and_grads(
                    rnets, M, gen_f, gen_d, pair.f_vol, pair.d_vol,
                    pair.f_vol, pair.d_vol, grad_arrays, weights=weights)
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
            raise NumericalAbortError(f"stage-2 iteration {it}: {exc}") from exc
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
    return rnets, man

def load_stage2(stage2_dir: str):
    """Rebuild the trained refinement nets from a run directory; returns
    (RefineNets, manifest)."""
    man = RunManifest.load(stage2_dir)
    if man.command != "train-stage2":
        raise DataError(f"{stage2_dir} holds a '{man.command}' run, not 'train-stage2'")
    ckpt_path = man.checkpoints.get("latest")
    if not ckpt_path or not os.path.exists(ckpt_path):
        raise DataError(f"{stage2_dir} has no saved checkpoint")
    cfg = man.config
    dtype = np.float32 if cfg["dtype"] == "float32" else np.float64
    rnets = RefineNets.build(backbone_channels=cfg["backbone_channels"],
                             arch=ArchConfig.from_dict(cfg["projector_arch"]),
                             dtype=dtype, seed=cfg["seed"])
    arrays = load_checkpoint(ckpt_path)
    for name, net in (("backbone", rnets.backbone), ("projector", rnets.projector)):
        key = f"net.{name}/params"
        if key not in arrays:
            raise DataError(f"checkpoint {ckpt_path} is missing {key}")
        if arrays[key].size != net.params.size:
            raise DataError(f"checkpoint {ckpt_path} entry {key} has "
                            f"{arrays[key].size} params, net expects {net.params.size}")
        net.params[:] = arrays[key].astype(dtype)
    return rnets, man
