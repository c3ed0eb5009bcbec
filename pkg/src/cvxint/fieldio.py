"""Binary field files, JSON manifests, and CSV diagnostics.

Field files carry raw little-endian float64 payloads behind a fixed 64-byte
header (magic ``CVXINT01`` plus integer geometry), so any language or
plotting stack can parse them with a dozen lines of code.  Manifests are
deterministic JSON documents: same run, same bytes.
"""

import csv
import hashlib
import json
import os

import numpy as np

from .flux import sigma
from .hull import s_delta_expression

MAGIC = b"CVXINT01"
HEADER_BYTES = 64
# header after the magic: seven little-endian uint64 slots
#   [n_spatial, n_components, time_slices, size0, size1, size2, reserved]
_SLOTS = 7


def write_field(path, values, n_spatial, components=0, time_slices=0):
    """Dump an array as a CVXINT01 field file.

    Shape convention: ``(time_slices, *sizes)`` for scalar data
    (components = 0, no component axis) and ``(time_slices, *sizes,
    components)`` for vector data; drop the leading axis when
    time_slices == 0.
    """
    values = np.asarray(values, dtype=np.float64)
    sizes = values.shape
    if time_slices:
        if sizes[0] != time_slices:
            raise ValueError("leading axis does not match time_slices")
        sizes = sizes[1:]
    if components:
        if sizes[-1] != components:
            raise ValueError("trailing axis does not match components")
        sizes = sizes[:-1]
    if len(sizes) != n_spatial or n_spatial > 3:
        raise ValueError(f"array shape {values.shape} does not describe a "
                         f"{n_spatial}-dimensional field")
    header = np.zeros(_SLOTS, dtype="<u8")
    header[0] = n_spatial
    header[1] = components
    header[2] = time_slices
    header[3:3 + n_spatial] = sizes
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header.tobytes())
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def read_field(path):
    """Load a CVXINT01 field file; returns (values, meta)."""
    with open(path, "rb") as fh:
        head = fh.read(HEADER_BYTES)
        payload = fh.read()
    if len(head) != HEADER_BYTES or head[:8] != MAGIC:
        raise ValueError(f"{path}: not a CVXINT01 field file")
    slots = np.frombuffer(head[8:], dtype="<u8")
    n_spatial, components, time_slices = (int(s) for s in slots[:3])
    sizes = tuple(int(s) for s in slots[3:3 + n_spatial])
    shape = (sizes if time_slices == 0 else (time_slices,) + sizes)
    if components:
        shape = shape + (components,)
    count = int(np.prod(shape))
    if len(payload) != 8 * count:
        raise ValueError(f"{path}: payload holds {len(payload)} bytes, "
                         f"header promises {8 * count}")
    values = np.frombuffer(payload, dtype="<f8").reshape(shape)
    meta = {"n_spatial": n_spatial, "components": components,
            "time_slices": time_slices, "sizes": sizes}
    return values, meta


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def jsonable(obj):
    """Recursively convert numpy scalars/arrays into plain JSON types."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if obj is None or isinstance(obj, str):
        return obj
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(path, obj):
    # sorted keys + fixed separators: identical document -> identical bytes
    text = json.dumps(jsonable(obj), indent=2, sort_keys=True)
    with open(path, "w") as fh:
        fh.write(text + "\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_csv(path, fieldnames, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _csv_cell(row.get(k)) for k in fieldnames})


def _csv_cell(value):
    if isinstance(value, (np.floating, float)):
        return repr(float(value))  # shortest round-trip decimal
    if isinstance(value, (np.integer, int)) and not isinstance(value, bool):
        return int(value)
    return value


# -- run artifacts ----------------------------------------------------------------


PAIR_CHANNELS = ("u", "v", "du", "vt")


def write_pair_fields(out_dir, pair, tag):
    """Dump the four space-time channels of a pair; returns inventory rows."""
    grid = pair.grid
    slices = grid.nt + 1
    channels = {
        "u": (pair.u.values, 0),
        "v": (pair.v.values, grid.n),
        "du": (pair.du, grid.n),
        "vt": (pair.vt, grid.n),
    }
    records = []
    for name in PAIR_CHANNELS:
        values, components = channels[name]
        fname = f"{tag}_{name}.field"
        path = os.path.join(out_dir, fname)
        write_field(path, values, grid.n, components=components,
                    time_slices=slices)
        records.append({
            "file": fname,
            "field": name,
            "tag": tag,
            "sha256": sha256_file(path),
            "bytes": os.path.getsize(path),
        })
    return records


def datum_diagnostics_rows(datum, tol_k=1e-3):
    """Per-slice rows: time, weighted mass, max |Du|, membership fraction."""
    grid = datum.grid
    W = grid.weight_array()
    core = tuple(slice(1, -1) for _ in range(grid.n))
    rows = []
    for s, t in enumerate(grid.times):
        p = datum.du[(s,) + core]
        beta = datum.vt[(s,) + core]
        pn = np.linalg.norm(p, axis=-1)
        k_band = (pn <= datum.profile.m_minus + tol_k) & (
            np.linalg.norm(beta - sigma(p), axis=-1) <= tol_k)
        expr = s_delta_expression(p, beta, datum.profile.delta)
        rows.append({
            "step": s,
            "time": float(t),
            "mass": float(np.sum(datum.u.values[s] * W)),
            "max_du": float(np.max(np.linalg.norm(datum.du[s], axis=-1))),
            "membership_fraction": float(np.mean(k_band | (expr < 0.0))),
        })
    return rows


DIAGNOSTIC_COLUMNS = ("step", "time", "mass", "max_du", "membership_fraction")


def run_manifest(config, datum, pairs, inventory, extra=None):
    """Assemble the deterministic run manifest document."""
    steps = []
    for pair in pairs:
        steps.append(pair.certificates.get("step", {}))
    iteration = pairs[-1].certificates.get("iteration", {}) if pairs else {}
    manifest = {
        "format": "cvxint-run/1",
        "config": config,
        "datum": {
            "mu": datum.mu,
            "classification": datum.classification,
            "poisson_info": datum.poisson_info,
        },
        "steps": steps,
        "iteration": iteration,
        "fields": inventory,
    }
    if extra:
        manifest.update(extra)
    return manifest
