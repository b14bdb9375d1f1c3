"""Config schemas for the command-line entry points.

Configs are flat JSON objects validated strictly: an unknown key is a hard
error (exit code 2 at the CLI), so a typo in a loss-weight name can never
pass silently. Every command's resolved config round-trips through to_dict
and is snapshotted verbatim into the run manifest.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields

from .net import ArchConfig
from .volume import CLASS_TAGS


class ConfigError(ValueError):
    """Invalid configuration: unknown key, bad type, or bad value."""


class DataError(ValueError):
    """Invalid or inconsistent input data (files, dims, modalities)."""


STAGE1_COMPONENTS = ("noise_l1_f", "noise_l1_d", "noise_mic_f", "noise_mic_d",
                     "pattern_l1_f", "pattern_l1_d", "pattern_mic_f",
                     "pattern_mic_d", "l_pa")
STAGE2_COMPONENTS = ("tis_l1_f", "tis_l1_d", "tis_mic_f", "tis_mic_d", "l_mic")

DIRECTIONS = ("d->f", "f->d")
DTYPES = ("float32", "float64")
SAMPLE_MODES = ("stochastic", "mean")
NOISE_COUPLINGS = ("shared", "independent")


def load_json_config(path: str | os.PathLike) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    return doc


def _reject_unknown(doc: dict, cls) -> None:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}; known keys are {sorted(known)}")


def _require(doc: dict, key: str):
    if key not in doc or doc[key] is None:
        raise ConfigError(f"missing required config key '{key}'")
    return doc[key]


def _as_int(doc: dict, key: str, lo: int | None = None, hi: int | None = None):
    if key not in doc:
        return
    v = doc[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"config key '{key}' must be an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(f"config key '{key}' must be >= {lo}, got {v}")
    if hi is not None and v > hi:
        raise ConfigError(f"config key '{key}' must be <= {hi}, got {v}")


def _as_number(doc: dict, key: str):
    if key in doc and (isinstance(doc[key], bool) or not isinstance(doc[key], (int, float))):
        raise ConfigError(f"config key '{key}' must be a number, got {doc[key]!r}")


def _as_bool(doc: dict, key: str):
    if key in doc and not isinstance(doc[key], bool):
        raise ConfigError(f"config key '{key}' must be a boolean, got {doc[key]!r}")


def _as_str(doc: dict, key: str, choices=None):
    if key not in doc or doc[key] is None:
        return
    v = doc[key]
    if not isinstance(v, str):
        raise ConfigError(f"config key '{key}' must be a string, got {v!r}")
    if choices is not None and v not in choices:
        raise ConfigError(f"config key '{key}' must be one of {list(choices)}, got {v!r}")


def _as_dims(doc: dict, key: str):
    if key not in doc or doc[key] is None:
        return
    v = doc[key]
    if (not isinstance(v, (list, tuple)) or len(v) != 3
            or any(isinstance(n, bool) or not isinstance(n, int) or n < 1 for n in v)):
        raise ConfigError(f"config key '{key}' must be a list of 3 positive integers, got {v!r}")
    doc[key] = tuple(v)


def _as_weights(doc: dict, key: str, allowed: tuple[str, ...]):
    if key not in doc or doc[key] is None:
        return
    v = doc[key]
    if not isinstance(v, dict):
        raise ConfigError(f"config key '{key}' must be an object, got {v!r}")
    unknown = sorted(set(v) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown loss components in '{key}': {unknown}; known: {list(allowed)}")
    for name, w in v.items():
        if isinstance(w, bool) or not isinstance(w, (int, float)):
            raise ConfigError(f"weight '{name}' must be a number, got {w!r}")


def resolve_weights(overrides: dict | None, allowed: tuple[str, ...]) -> dict:
    out = {name: 1.0 for name in allowed}
    for name, w in (overrides or {}).items():
        out[name] = float(w)
    return out


def _as_arch(doc: dict, key: str):
    if key not in doc or doc[key] is None:
        return
    v = doc[key]
    if not isinstance(v, dict):
        raise ConfigError(f"config key '{key}' must be an object, got {v!r}")
    try:
        ArchConfig.from_dict(v)
    except ValueError as exc:
        raise ConfigError(f"bad '{key}': {exc}")


_DEFAULT_ARCH = {"widths": [8, 16, 32], "res_units": 1, "time_dim": 16, "attention": False}


@dataclass(frozen=True)
class PhantomCmdConfig:
    out_dir: str
    n_subjects: int = 4
    dims: tuple = (32, 32, 32)
    dims_d: tuple | None = None
    k_regions: int = 8
    class_mix: dict | None = None
    offset_scale: float = 0.15
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: dict) -> "PhantomCmdConfig":
        doc = dict(doc)
        _reject_unknown(doc, cls)
        _require(doc, "out_dir")
        _as_str(doc, "out_dir")
        _as_int(doc, "n_subjects", lo=1)
        _as_dims(doc, "dims")
        _as_dims(doc, "dims_d")
        _as_int(doc, "k_regions", lo=1)
        _as_number(doc, "offset_scale")
        _as_int(doc, "seed", lo=0)
        mix = doc.get("class_mix")
        if mix is not None:
            if not isinstance(mix, dict) or not mix:
                raise ConfigError("class_mix must be a non-empty object of tag -> count")
            for tag, n in mix.items():
                if tag not in CLASS_TAGS:
                    raise ConfigError(f"unknown class tag {tag!r}; known: {list(CLASS_TAGS)}")
                if isinstance(n, bool) or not isinstance(n, int) or n < 0:
                    raise ConfigError(f"class_mix[{tag!r}] must be a non-negative integer")
            if "n_subjects" in doc and doc["n_subjects"] != sum(mix.values()):
                raise ConfigError("n_subjects disagrees with the class_mix total")
            doc["n_subjects"] = sum(mix.values())
            if doc["n_subjects"] < 1:
                raise ConfigError("class_mix must request at least one subject")
        return cls(**doc)

    def subject_plan(self) -> list[tuple[str, int]]:
        """(class_tag, subject_seed) per subject, in stable order."""
        mix = self.class_mix or {"NC": self.n_subjects}
        plan = []
        i = 0
        for tag, count in mix.items():
            for _ in range(count):
                plan.append((tag, self.seed + i))
                i += 1
        return plan

    def to_dict(self) -> dict:
        return {
            "out_dir": self.out_dir, "n_subjects": self.n_subjects,
            "dims": list(self.dims),
            "dims_d": list(self.dims_d) if self.dims_d else None,
            "k_regions": self.k_regions, "class_mix": self.class_mix,
            "offset_scale": self.offset_scale, "seed": self.seed,
        }


@dataclass(frozen=True)
class Stage1Config:
    data_dir: str
    out_dir: str
    seed: int = 0
    iters: int = 2000
    batch_size: int = 2
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    sigma_rule: str = "sqrt_beta"
    lr: float = 1e-3
    weight_decay: float = 5e-6
    arch: dict = field(default_factory=lambda: dict(_DEFAULT_ARCH))
    dtype: str = "float32"
    noise_coupling: str = "shared"
    share_pattern_estimator: bool = False
    pattern_enabled: bool = True
    weights: dict | None = None
    dedupe_pattern_terms: bool = False
    checkpoint_every: int = 200
    perception_seed: int = 1234

    @classmethod
    def from_dict(cls, doc: dict) -> "Stage1Config":
        doc = dict(doc)
        _reject_unknown(doc, cls)
        _as_str(doc, "data_dir")
        _as_str(doc, "out_dir")
        _require(doc, "data_dir")
        _require(doc, "out_dir")
        _as_int(doc, "seed", lo=0)
        _as_int(doc, "iters", lo=0)
        _as_int(doc, "batch_size", lo=1)
        _as_int(doc, "T", lo=1)
        _as_number(doc, "beta_start")
        _as_number(doc, "beta_end")
        _as_str(doc, "sigma_rule", choices=("sqrt_beta", "posterior"))
        _as_number(doc, "lr")
        _as_number(doc, "weight_decay")
        _as_arch(doc, "arch")
        _as_str(doc, "dtype", choices=DTYPES)
        _as_str(doc, "noise_coupling", choices=NOISE_COUPLINGS)
        _as_bool(doc, "share_pattern_estimator")
        _as_bool(doc, "pattern_enabled")
        _as_weights(doc, "weights", STAGE1_COMPONENTS)
        _as_bool(doc, "dedupe_pattern_terms")
        _as_int(doc, "checkpoint_every", lo=1)
        _as_int(doc, "perception_seed", lo=0)
        return cls(**doc)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["arch"] = dict(self.arch)
        out["weights"] = dict(self.weights) if self.weights else None
        return out


@dataclass(frozen=True)
class Stage2Config:
    data_dir: str
    out_dir: str
    stage1_dir: str
    seed: int = 0
    iters: int = 1000
    batch_size: int = 2
    lr: float = 1e-3
    weight_decay: float = 5e-6
    dtype: str = "float32"
    backbone_channels: int = 8
    projector_arch: dict = field(default_factory=lambda: dict(_DEFAULT_ARCH))
    weights: dict | None = None
    dedupe_mic_term: bool = False
    checkpoint_every: int = 200
    perception_seed: int = 1234
    sample_mode: str = "mean"

    @classmethod
    def from_dict(cls, doc: dict) -> "Stage2Config":
        doc = dict(doc)
        _reject_unknown(doc, cls)
        for key in ("data_dir", "out_dir", "stage1_dir"):
            _as_str(doc, key)
            _require(doc, key)
        _as_int(doc, "seed", lo=0)
        _as_int(doc, "iters", lo=0)
        _as_int(doc, "batch_size", lo=1)
        _as_number(doc, "lr")
        _as_number(doc, "weight_decay")
        _as_str(doc, "dtype", choices=DTYPES)
        _as_int(doc, "backbone_channels", lo=1)
        _as_arch(doc, "projector_arch")
        _as_weights(doc, "weights", STAGE2_COMPONENTS)
        _as_bool(doc, "dedupe_mic_term")
        _as_int(doc, "checkpoint_every", lo=1)
        _as_int(doc, "perception_seed", lo=0)
        _as_str(doc, "sample_mode", choices=SAMPLE_MODES)
        return cls(**doc)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["projector_arch"] = dict(self.projector_arch)
        out["weights"] = dict(self.weights) if self.weights else None
        return out


@dataclass(frozen=True)
class SynthesizeConfig:
    stage1_dir: str
    source_path: str
    direction: str
    out_path: str
    stage2_dir: str | None = None
    seed: int = 0
    mode: str = "stochastic"
    pre_refine: bool = False

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthesizeConfig":
        doc = dict(doc)
        _reject_unknown(doc, cls)
        for key in ("stage1_dir", "source_path", "direction", "out_path"):
            _as_str(doc, key)
            _require(doc, key)
        _as_str(doc, "stage2_dir")
        _as_str(doc, "direction", choices=DIRECTIONS)
        _as_int(doc, "seed", lo=0)
        _as_str(doc, "mode", choices=SAMPLE_MODES)
        _as_bool(doc, "pre_refine")
        if doc.get("pre_refine") and not doc.get("stage2_dir"):
            raise ConfigError("pre_refine requires stage2_dir (there is no refined output without it)")
        return cls(**doc)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class EvaluateConfig:
    gen_path: str
    ref_path: str
    out_path: str
    mask_path: str | None = None

    @classmethod
    def from_dict(cls, doc: dict) -> "EvaluateConfig":
        doc = dict(doc)
        _reject_unknown(doc, cls)
        for key in ("gen_path", "ref_path", "out_path"):
            _as_str(doc, key)
            _require(doc, key)
        _as_str(doc, "mask_path")
        return cls(**doc)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}
