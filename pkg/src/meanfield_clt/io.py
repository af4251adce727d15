"""Artifact writers: RFC-4180 CSV tables, JSON documents, run manifests and
a versioned binary cache for particle paths."""

import csv
import hashlib
import json
import math
import platform
from pathlib import Path

import numpy as np

from . import __version__
from ._accel import backend_name
from .noise import RNG_ALGORITHM

PATH_CACHE_VERSION = 1


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return repr(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows):
    """Write ``rows`` under ``header``; floats use round-trip ``repr``."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])
    return path


def read_csv(path):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.floating, float)):
        f = float(o)
        return f if math.isfinite(f) else str(f)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    return o


def write_json(path, obj):
    path = Path(path)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def canonical_hash(obj):
    blob = json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def software_versions():
    import numba
    import scipy

    return {
        "meanfield_clt": __version__, "python": platform.python_version(),
        "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__,
        "kernel_backend": backend_name(),
    }


def write_manifest(out_dir, config, pipeline, seed, files, extra=None):
    """Manifest with config hash, seed, RNG id, versions and data-file digests.

    The wall-clock timestamp goes to ``run_timestamp.txt`` so the manifest
    itself is reproducible.
    """
    out_dir = Path(out_dir)
    manifest = {
        "pipeline": pipeline,
        "config_hash": canonical_hash(config),
        "config": config,
        "seed": int(seed),
        "rng_algorithm": RNG_ALGORITHM,
        "versions": software_versions(),
        "files": {Path(f).name: file_sha256(f) for f in files},
        "path_cache_version": PATH_CACHE_VERSION,
    }
    if extra:
        manifest.update(extra)
    return write_json(out_dir / "manifest.json", manifest)


def save_path_cache(path, batch, y_path=None, meta=None):
    """Compact binary cache of a particle batch for kernel-stage reuse."""
    arrays = {"format_version": np.array(PATH_CACHE_VERSION), "grid": batch.grid, "states": batch.states, "lanes": batch.lanes}
    if batch.brownian is not None:
        arrays["brownian"] = batch.brownian
    if batch.events is not None:
        for f in ("pid", "step", "t", "mark", "u", "rate", "accepted"):
            arrays[f"event_{f}"] = getattr(batch.events, f)
    if y_path is not None:
        arrays["y_path"] = y_path
    if meta:
        arrays["meta_json"] = np.array(json.dumps(_jsonable(meta), sort_keys=True))
    np.savez_compressed(path, **arrays)
    return Path(path)


def load_path_cache(path):
    from .simulate import EventTable, ParticleBatch

    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != PATH_CACHE_VERSION:
            raise ValueError(f"unsupported path cache version {version}")
        events = None
        if "event_pid" in z:
            events = EventTable(*(z[f"event_{f}"] for f in ("pid", "step", "t", "mark", "u", "rate", "accepted")))
        batch = ParticleBatch(z["grid"], z["states"], z["lanes"], z["brownian"] if "brownian" in z else None, events)
        y_path = z["y_path"] if "y_path" in z else None
        meta = json.loads(str(z["meta_json"])) if "meta_json" in z else {}
    return batch, y_path, meta
