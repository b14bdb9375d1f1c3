"""Command-line interface.

Subcommands: phantom, train-stage1, train-stage2, synthesize, evaluate.
Every command takes --config <json>; --seed and --out override the file's
seed and output location. Exit codes: 0 success, 2 config error, 3 data
error, 4 numerical abort. PDS_THREADS caps numeric-library parallelism.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

import numpy as np

from .config import (
    ConfigError,
    DataError,
    EvaluateConfig,
    PhantomCmdConfig,
    Stage1Config,
    Stage2Config,
    SynthesizeConfig,
    load_json_config,
)
from .manifest import new_manifest
from .metrics import build_quality_report
from .net import ArchConfig, RefineNets
from .nifti import NiftiParseError, load_nifti, save_nifti
from .pdm import NumericalAbortError, load_stage1, sample_pair, train_stage1
from .phantom import load_dataset, write_dataset
from .refine import load_stage2, tissue_forward, train_stage2
from .volume import AtlasMask, Volume3


def _atomic_json(path: str, doc: dict) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _check_grid(dims, arch_doc: dict, what: str) -> None:
    levels = len(arch_doc["widths"])
    div = 2 ** (levels - 1)
    if any(d % div for d in dims):
        raise DataError(f"{what} dims {tuple(dims)} must be divisible by {div} "
                        f"for a {levels}-level net")


def _require_volume3(vol, path: str) -> Volume3:
    if not isinstance(vol, Volume3):
        raise DataError(f"{path} holds a 4D series; a 3D volume is required")
    return vol


def cmd_phantom(doc: dict) -> int:
    cfg = PhantomCmdConfig.from_dict(doc)
    index = write_dataset(cfg)
    man = new_manifest("phantom", cfg.to_dict(), seeds={"root": cfg.seed},
                       extra={"n_subjects": len(index["subjects"])})
    man.status = "complete"
    man.save(cfg.out_dir)
    print(f"wrote {len(index['subjects'])} subject pairs to {cfg.out_dir}")
    return 0


def cmd_train_stage1(doc: dict) -> int:
    cfg = Stage1Config.from_dict(doc)
    pairs, masks, _ = load_dataset(cfg.data_dir)
    _check_grid(pairs[0].f_vol.dims, cfg.arch, "modality-f")
    _check_grid(pairs[0].d_vol.dims, cfg.arch, "modality-d")
    _, man = train_stage1(pairs, masks, cfg)
    total = man.loss_trace["total"]
    last = f"{total[-1]:.6f}" if total else "n/a"
    print(f"stage-1 {man.status}: {man.iters_done} iterations, last loss {last}")
    return 0


def cmd_train_stage2(doc: dict) -> int:
    cfg = Stage2Config.from_dict(doc)
    pairs, _, _ = load_dataset(cfg.data_dir)
    nets1, sched, man1 = load_stage1(cfg.stage1_dir)
    if list(pairs[0].f_vol.dims) != man1.extra["dims_f"] \
            or list(pairs[0].d_vol.dims) != man1.extra["dims_d"]:
        raise DataError(
            f"dataset dims {pairs[0].f_vol.dims}/{pairs[0].d_vol.dims} do not match "
            f"the stage-1 run's {man1.extra['dims_f']}/{man1.extra['dims_d']}")
    _check_grid(pairs[0].f_vol.dims, cfg.projector_arch, "modality-f")
    _check_grid(pairs[0].d_vol.dims, cfg.projector_arch, "modality-d")
    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    rnets = RefineNets.build(backbone_channels=cfg.backbone_channels,
                             arch=ArchConfig.from_dict(cfg.projector_arch),
                             dtype=dtype, seed=cfg.seed)
    _, man = train_stage2(nets1, rnets, pairs, cfg, sched)
    total = man.loss_trace["total"]
    last = f"{total[-1]:.6f}" if total else "n/a"
    print(f"stage-2 {man.status}: {man.iters_done} iterations, last loss {last}")
    return 0


def cmd_synthesize(doc: dict) -> int:
    cfg = SynthesizeConfig.from_dict(doc)
    nets1, sched, man1 = load_stage1(cfg.stage1_dir)
    source = _require_volume3(load_nifti(cfg.source_path), cfg.source_path)
    src_key, tar_key = (("dims_d", "dims_f") if cfg.direction == "d->f"
                        else ("dims_f", "dims_d"))
    src_dims = tuple(man1.extra[src_key])
    tar_dims = tuple(man1.extra[tar_key])
    if source.dims != src_dims:
        raise DataError(f"source dims {source.dims} do not match the trained "
                        f"source-modality grid {src_dims} for direction {cfg.direction}")
    gen = sample_pair(nets1, source, cfg.direction, sched, seed=cfg.seed,
                      mode=cfg.mode, target_dims=tar_dims)
    outputs = [cfg.out_path]
    out_vol = gen
    if cfg.stage2_dir is not None:
        rnets, _ = load_stage2(cfg.stage2_dir)
        refined = tissue_forward(rnets, gen, source)
        out_vol = refined.with_data(np.clip(refined.data, 0.0, 1.0))
        if cfg.pre_refine:
            stem = cfg.out_path[:-4] if cfg.out_path.endswith(".nii") else cfg.out_path
            gen_path = stem + ".gen.nii"
            save_nifti(gen, gen_path)
            outputs.append(gen_path)
    save_nifti(out_vol, cfg.out_path)
    man = new_manifest("synthesize", cfg.to_dict(), seeds={"root": cfg.seed},
                       schedule=man1.schedule,
                       extra={"stage1_run": man1.run_id, "outputs": outputs,
                              "dims": list(out_vol.dims)})
    man.status = "complete"
    man.save_to(cfg.out_path + ".manifest.json")
    print(f"synthesized {cfg.direction} volume {out_vol.dims} -> {cfg.out_path}")
    return 0


def cmd_evaluate(doc: dict) -> int:
    cfg = EvaluateConfig.from_dict(doc)
    gen = _require_volume3(load_nifti(cfg.gen_path), cfg.gen_path)
    ref = _require_volume3(load_nifti(cfg.ref_path), cfg.ref_path)
    if gen.dims != ref.dims:
        raise DataError(f"volume dims differ: {gen.dims} vs {ref.dims}")
    mask = None
    if cfg.mask_path is not None:
        mvol = _require_volume3(load_nifti(cfg.mask_path), cfg.mask_path)
        if mvol.dims != gen.dims:
            raise DataError(f"mask dims {mvol.dims} do not match volume dims {gen.dims}")
        mask = AtlasMask(mvol.dims, np.rint(mvol.data).astype(np.int32))
    report = build_quality_report(gen, ref, mask).to_json_dict()
    _atomic_json(cfg.out_path, report)
    man = new_manifest("evaluate", cfg.to_dict(), seeds={},
                       extra={"report": report})
    man.status = "complete"
    man.save_to(cfg.out_path + ".manifest.json")
    print(f"psnr_db={report['psnr_db']} ssim={report['ssim']:.6f} -> {cfg.out_path}")
    return 0


_OUT_KEY = {
    "phantom": "out_dir",
    "train-stage1": "out_dir",
    "train-stage2": "out_dir",
    "synthesize": "out_path",
    "evaluate": "out_path",
}

_DISPATCH = {
    "phantom": cmd_phantom,
    "train-stage1": cmd_train_stage1,
    "train-stage2": cmd_train_stage2,
    "synthesize": cmd_synthesize,
    "evaluate": cmd_evaluate,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pds",
        description="Bidirectional cross-modal 3D volume synthesis on phantom data.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "phantom": "generate a paired phantom dataset",
        "train-stage1": "train the dual-modal noise and pattern estimators",
        "train-stage2": "train the tissue refinement nets on stage-1 output",
        "synthesize": "synthesize the complementary modality for one volume",
        "evaluate": "compare a synthesized volume against a reference",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", required=True, metavar="PATH",
                        help="JSON config file")
        sp.add_argument("--out", default=None, metavar="PATH",
                        help=f"override {_OUT_KEY[name]}")
        if name != "evaluate":
            sp.add_argument("--seed", type=int, default=None,
                            help="override the config seed")
        if name == "synthesize":
            sp.add_argument("--pre-refine", action="store_true", dest="pre_refine",
                            help="also write the unrefined generation")
    return parser


def entry(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        return code if isinstance(code, int) else 2
    try:
        doc = load_json_config(args.config)
        seed = getattr(args, "seed", None)
        if seed is not None:
            doc["seed"] = seed
        if args.out is not None:
            doc[_OUT_KEY[args.command]] = args.out
        if getattr(args, "pre_refine", False):
            doc["pre_refine"] = True
        return _DISPATCH[args.command](doc)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, NiftiParseError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalAbortError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(entry())
