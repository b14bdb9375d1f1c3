"""Shared test fixtures: small random volumes, tiny phantom datasets, and a
CLI runner. Everything is seeded so the suite is deterministic end to end."""

from __future__ import annotations

import json
import subprocess
import sys

import numpy as np
import pytest

from pds import PhantomConfig, Volume3, make_phantom_pair


def rand_volume(dims, seed=0, lo=0.0, hi=1.0, spacing=(1.0, 1.0, 1.0)) -> Volume3:
    rng = np.random.default_rng(seed)
    return Volume3(dims, spacing, rng.uniform(lo, hi, size=dims))


def tiny_dataset(n=2, dims=(8, 8, 8), dims_d=None, k_regions=3, atlas_seed=0):
    """(pairs, (mask_f, mask_d)) straight from the phantom generator."""
    cfg = PhantomConfig(dims=dims, dims_d=dims_d, k_regions=k_regions, seed=atlas_seed)
    pairs = []
    mask_f = mask_d = None
    for i in range(n):
        pair, mask_f, mask_d = make_phantom_pair(atlas_seed + i, cfg)
        pairs.append(pair)
    return pairs, (mask_f, mask_d)


def run_cli(*args):
    """Run the installed pds entry point; returns (code, stdout, stderr)."""
    proc = subprocess.run([sys.executable, "-m", "pds.cli", *args],
                          capture_output=True, text=True)
    return proc.returncode, proc.stdout, proc.stderr


def write_json(path, doc):
    path.write_text(json.dumps(doc) + "\n")
    return str(path)


@pytest.fixture(scope="session")
def phantom_pair_8():
    """One 8-cubed phantom pair plus masks, shared across tests."""
    pairs, masks = tiny_dataset(n=1, dims=(8, 8, 8))
    return pairs[0], masks
