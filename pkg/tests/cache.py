"""Disk cache for the expensive datasets used by the slow tests.

Entries are keyed by the generating arguments and by a hash of the modules
that determine dataset contents, so a code change invalidates them.
"""
import hashlib
from pathlib import Path

import decompopf
from decompopf.datagen import DatasetError, LoadSamplerConfig, generate_dataset, read_dataset, write_dataset

ROOT = Path(__file__).resolve().parent.parent / ".acceptance_cache"
_SOURCES = ("netmodel.py", "acopf.py", "solver.py", "datagen.py", "partition.py")


def _code_hash() -> str:
    pkg = Path(decompopf.__file__).parent
    h = hashlib.sha256()
    for name in _SOURCES:
        h.update((pkg / name).read_bytes())
    return h.hexdigest()[:12]


def cached_dataset(case, assignment, T: int, seed: int):
    path = ROOT / f"{case.name}_{assignment.digest}_T{T}_s{seed}_{_code_hash()}"
    if path.exists():
        try:
            return read_dataset(path)
        except DatasetError:
            pass
    ds = generate_dataset(case, assignment, T, LoadSamplerConfig(seed=seed))
    write_dataset(ds, path)
    return ds
