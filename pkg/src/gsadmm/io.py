"""CSV and manifest artifacts.

Floats are written with 17 significant digits, which round-trips every
double exactly. Manifests are JSON and carry SHA-256 digests of the files
they describe.
"""

import csv
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return format(float(v), ".17g")


def _as_columns(series):
    cols = dict(series)
    if not cols:
        raise ValueError("series is empty")
    out, n = {}, None
    for name, vals in cols.items():
        arr = np.asarray(vals)
        if arr.ndim != 1:
            raise ValueError(f"column {name!r} is not one-dimensional")
        if n is None:
            n = len(arr)
        elif len(arr) != n:
            raise ValueError(f"column {name!r} has length {len(arr)}, expected {n}")
        out[str(name)] = arr
    if n == 0:
        raise ValueError("series has no rows")
    return out


def emit_csv(series, path):
    """Write named columns (a mapping or ``(name, values)`` pairs) with a header.

    Returns the path written.
    """
    cols = _as_columns(series)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(cols)
    rows = zip(*(cols[k].tolist() for k in names))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path):
    """Read a file written by :func:`emit_csv` into float arrays."""
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        data = [[float(v) for v in row] for row in rd]
    arr = np.array(data, dtype=float).reshape(len(data), len(header))
    return {name: arr[:, i] for i, name in enumerate(header)}


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ------------------------------------------------------------ column layouts

def _vector_columns(prefix, arr):
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    return {f"{prefix}_{i}": arr[:, i] for i in range(arr.shape[1])}


def trajectory_columns(traj, phi=None):
    """``step, t, x_i, z_i, u_i, r_norm, ralpha_norm, phi`` for one ADMM run."""
    n = len(traj.xs)
    cols = {"step": np.arange(n), "t": traj.ts}
    cols.update(_vector_columns("x", traj.xs))
    cols.update(_vector_columns("z", traj.zs))
    cols.update(_vector_columns("u", traj.us))
    cols["r_norm"] = np.linalg.norm(np.atleast_2d(traj.rs.T).T, axis=-1)
    cols["ralpha_norm"] = np.linalg.norm(np.atleast_2d(traj.ras.T).T, axis=-1)
    if phi is not None:
        cols["phi"] = np.asarray(phi(traj.xs[:, None, :]))[:, 0]
    elif traj.test_values is not None:
        cols["phi"] = traj.test_values
    return cols


def sme_trajectory_columns(traj, phi=None):
    """``step, t, X_i, phi`` for one SME path."""
    n = len(traj.Xs)
    cols = {"step": np.arange(n), "t": traj.ts}
    cols.update(_vector_columns("X", traj.Xs))
    if phi is not None:
        cols["phi"] = np.asarray(phi(traj.Xs[:, None, :]))[:, 0]
    return cols


def stats_columns(stats, prefix=""):
    """Per-time ensemble statistics; ``prefix`` distinguishes ADMM and SME."""
    p = prefix + "_" if prefix else ""
    cols = {f"{p}mean_phi": stats.mean_phi, f"{p}std_phi": stats.std_phi}
    cols.update(_vector_columns(f"{p}mean_x", stats.mean_x))
    cols.update(_vector_columns(f"{p}std_x", stats.std_x))
    for key in ("r", "ra"):
        mean = getattr(stats, "mean_" + key)
        if mean is not None:
            cols[f"{p}mean_{key}_norm"] = mean
            cols[f"{p}std_{key}_norm"] = getattr(stats, "std_" + key)
    return cols


# --------------------------------------------------------------- manifests

@dataclass
class RunManifest:
    """What was run and what it produced.

    ``ensembles`` lists ``{label, base_seed, M, seeds, diverged}`` per
    ensemble. ``outputs`` maps file names to SHA-256 digests.
    """

    config: dict
    base_seed: int
    version: str
    ensembles: list = field(default_factory=list)
    outputs: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    started: str = ""

    def comparable(self):
        """Everything except the timing fields."""
        d = asdict(self)
        d.pop("wall_clock")
        d.pop("started")
        return d


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_manifest(manifest, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_clean(asdict(manifest)), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_manifest(path):
    with open(path) as fh:
        return RunManifest(**json.load(fh))


def now_iso():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")
