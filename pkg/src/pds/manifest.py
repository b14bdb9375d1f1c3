"""Run manifests: the JSON record that makes every command replayable.

A manifest pins the resolved config (and its hash), the seeds, schedule
parameters, per-component loss traces, and checkpoint paths. Re-running a
command from its manifest's config reproduces checkpoints and outputs
bitwise in 64-bit mode; training resumes from the last checkpoint when the
output directory already holds a manifest with a matching config hash.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field

MANIFEST_NAME = "manifest.json"


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()) + "Z"


@dataclass
class RunManifest:
    command: str
    config: dict
    config_hash: str
    seeds: dict
    schedule: dict | None = None
    loss_trace: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    status: str = "running"
    iters_done: int = 0
    run_id: str = ""
    created_at: str = ""
    updated_at: str = ""
    wall_clock_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.run_id:
            self.run_id = self.config_hash[:12]
        if not self.created_at:
            self.created_at = _now()
        if not self.updated_at:
            self.updated_at = self.created_at

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunManifest":
        return cls(**doc)

    def save(self, out_dir: str | os.PathLike) -> str:
        return self.save_to(os.path.join(os.fspath(out_dir), MANIFEST_NAME))

    def save_to(self, path: str | os.PathLike) -> str:
        self.updated_at = _now()
        path = os.fspath(path)
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, out_dir_or_path: str | os.PathLike) -> "RunManifest":
        path = os.fspath(out_dir_or_path)
        if os.path.isdir(path):
            path = os.path.join(path, MANIFEST_NAME)
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def new_manifest(command: str, cfg: dict, seeds: dict,
                 schedule: dict | None = None, extra: dict | None = None) -> RunManifest:
    return RunManifest(command=command, config=cfg, config_hash=config_hash(cfg),
                       seeds=seeds, schedule=schedule, extra=extra or {})
