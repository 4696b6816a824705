"""Text formats: JSON model files and versioned columnar CSV.

Columnar files start with ``#`` header lines::

    # gcgm-columnar v1
    # kind: dataset
    # seed: 7
    # config: {"side": 2, ...}
    block,index,i,j,value
    node,0,0,,50

Each row is one entry of a node vector (``j`` empty) or of an edge table.
The block names used are ``node``/``edge`` for counts, ``obs`` and
``observed`` for observations, ``wind`` for wind components and
``node_mean``/``edge_mean``/``node_se``/``edge_se``/``node_var`` for estimates.
"""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict

import numpy as np

from .errors import FormatError
from .model import TreeModel

__all__ = [
    "FORMAT_VERSION",
    "write_model",
    "read_model",
    "model_to_dict",
    "model_from_dict",
    "write_columnar",
    "read_columnar",
    "write_dataset",
    "read_dataset",
    "write_estimates",
    "read_estimates",
    "write_observations",
    "read_observations",
    "write_table",
    "read_table",
]

FORMAT_VERSION = 1
MAGIC = "gcgm-columnar"
COLUMNS = ["block", "index", "i", "j", "value"]


# model files --------------------------------------------------------------

def model_to_dict(model):
    d = {
        "node_count": int(model.node_count),
        "domain_size": int(model.domain_size),
        "root": int(model.root),
        "edges": [[int(u), int(v)] for u, v in model.edges],
        "log_potentials": [np.asarray(t).tolist() for t in model.log_potentials],
    }
    if model.root_log_potential is not None:
        d["root_log_potential"] = np.asarray(model.root_log_potential).tolist()
    return d


def _field(d, key, source):
    if key not in d:
        raise FormatError(f"{source}: missing field '{key}'")
    return d[key]


def model_from_dict(d, source="<model>"):
    if not isinstance(d, dict):
        raise FormatError(f"{source}: top level must be an object")
    n = _field(d, "node_count", source)
    L = _field(d, "domain_size", source)
    if not isinstance(n, int) or not isinstance(L, int):
        raise FormatError(f"{source}: field 'node_count'/'domain_size' must be integers")
    edges = _field(d, "edges", source)
    try:
        edges = [(int(u), int(v)) for u, v in edges]
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{source}: field 'edges' must be a list of pairs") from exc
    pots = []
    for k, t in enumerate(_field(d, "log_potentials", source)):
        a = np.asarray(t, dtype=float)
        if a.shape != (L, L):
            raise FormatError(f"{source}: field 'log_potentials[{k}]' must be {L}x{L}")
        pots.append(a)
    root_pot = d.get("root_log_potential")
    if root_pot is not None:
        root_pot = np.asarray(root_pot, dtype=float)
        if root_pot.shape != (L,):
            raise FormatError(f"{source}: field 'root_log_potential' must have length {L}")
    return TreeModel(n, L, edges, pots, root_log_potential=root_pot, root=int(d.get("root", 0)))


def write_model(path, model):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=1)
        fh.write("\n")


def read_model(path):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return model_from_dict(d, str(path))


# columnar CSV -------------------------------------------------------------

def _fmt(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _parse(s, where):
    if s == "":
        return None
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError as exc:
        raise FormatError(f"{where}: cannot parse {s!r} as a number") from exc


def write_columnar(path, kind, rows, config=None, seed=None, extra=None):
    """Write ``rows`` of (block, index, i, j, value); ``j`` may be None."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {MAGIC} v{FORMAT_VERSION}\n")
        fh.write(f"# kind: {kind}\n")
        fh.write(f"# seed: {'' if seed is None else int(seed)}\n")
        fh.write(f"# config: {json.dumps(config or {}, sort_keys=True)}\n")
        for k, v in (extra or {}).items():
            fh.write(f"# {k}: {json.dumps(v, sort_keys=True)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for block, index, i, j, value in rows:
            w.writerow([block, int(index), int(i), "" if j is None else int(j), _fmt(value)])


def _read_header(fh, path):
    meta = {}
    lineno = 0
    first = True
    while True:
        pos = fh.tell()
        line = fh.readline()
        if not line:
            break
        lineno += 1
        if not line.startswith("#"):
            fh.seek(pos)
            lineno -= 1
            break
        body = line[1:].strip()
        if first:
            parts = body.split()
            if len(parts) != 2 or parts[0] != MAGIC and parts[0] != "gcgm-table":
                raise FormatError(f"{path}:1: not a gcgm file")
            try:
                meta["version"] = int(parts[1].lstrip("v"))
            except ValueError as exc:
                raise FormatError(f"{path}:1: bad version {parts[1]!r}") from exc
            if meta["version"] > FORMAT_VERSION:
                raise FormatError(f"{path}:1: unsupported version {meta['version']}")
            meta["magic"] = parts[0]
            first = False
            continue
        key, _, val = body.partition(":")
        key, val = key.strip(), val.strip()
        if key in ("kind",):
            meta[key] = val
        elif key == "seed":
            meta[key] = int(val) if val else None
        else:
            try:
                meta[key] = json.loads(val) if val else None
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: field '{key}' is not valid JSON") from exc
    if first:
        raise FormatError(f"{path}:1: missing header")
    return meta, lineno


def read_columnar(path):
    """Return (meta, rows) with rows as (block, index, i, j, value)."""
    with open(path, encoding="utf-8", newline="") as fh:
        meta, lineno = _read_header(fh, path)
        reader = csv.reader(fh)
        header = next(reader, None)
        lineno += 1
        if header != COLUMNS:
            raise FormatError(f"{path}:{lineno}: expected columns {','.join(COLUMNS)}")
        rows = []
        for rec in reader:
            lineno += 1
            if not rec:
                continue
            if len(rec) != 5:
                raise FormatError(f"{path}:{lineno}: expected 5 fields, got {len(rec)}")
            where = f"{path}:{lineno}"
            block = rec[0]
            index, i, j, value = (_parse(x, where) for x in rec[1:])
            if index is None or i is None or value is None:
                raise FormatError(f"{where}: empty index or value")
            rows.append((block, index, i, j, value))
    return meta, rows


def _collect(rows):
    out = defaultdict(dict)
    for block, index, i, j, value in rows:
        out[block][(index, i) if j is None else (index, i, j)] = value
    return out


def _dense(entries, shape, dtype, block, path):
    a = np.zeros(shape, dtype=dtype)
    for key, v in entries.items():
        try:
            a[key] = v
        except IndexError as exc:
            raise FormatError(f"{path}: block '{block}' index {key} out of range") from exc
    return a


def _count_rows(block, arr):
    arr = np.asarray(arr)
    if arr.ndim == 2:
        for u in range(arr.shape[0]):
            for i in range(arr.shape[1]):
                yield (block, u, i, None, arr[u, i])
    else:
        for e in range(arr.shape[0]):
            for i in range(arr.shape[1]):
                for j in range(arr.shape[2]):
                    yield (block, e, i, j, arr[e, i, j])


# datasets -----------------------------------------------------------------

def write_dataset(path, dataset):
    from .birdsim import resolve_wind

    cfg = dataset.config.to_dict()
    rows = list(_count_rows("node", dataset.node_counts))
    rows += _count_rows("edge", dataset.edge_counts)
    rows += _count_rows("obs", dataset.y)
    rows += _count_rows("wind", resolve_wind(dataset.config))
    write_columnar(path, "dataset", rows, config=cfg, seed=dataset.config.seed)


def read_dataset(path):
    from .birdsim import Dataset, GridConfig

    meta, rows = read_columnar(path)
    if meta.get("kind") != "dataset":
        raise FormatError(f"{path}: kind is {meta.get('kind')!r}, expected 'dataset'")
    try:
        config = GridConfig.from_dict(meta["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: field 'config' is incomplete: {exc}") from exc
    b = _collect(rows)
    T, L = config.horizon, config.L
    node = _dense(b["node"], (T, L), np.int64, "node", path)
    edge = _dense(b["edge"], (T - 1, L, L), np.int64, "edge", path)
    y = _dense(b["obs"], (T, L), np.int64, "obs", path)
    return Dataset(node, edge, y, config)


def write_observations(path, obs, config=None, seed=None):
    rows = list(_count_rows("obs", obs.y))
    rows += [("observed", u, 0, None, int(bool(o))) for u, o in enumerate(obs.observed)]
    noise = {"kind": obs.noise.kind, "variance": obs.noise.variance, "lam": obs.noise.lam}
    write_columnar(path, "observations", rows, config=config, seed=seed, extra={"noise": noise})


def read_observations(path, n, L):
    from .counts import NoiseModel, ObservationSet

    meta, rows = read_columnar(path)
    b = _collect(rows)
    y = _dense(b["obs"], (n, L), float, "obs", path)
    if b.get("observed"):
        observed = _dense(b["observed"], (n, 1), int, "observed", path)[:, 0].astype(bool)
    else:
        observed = np.ones(n, dtype=bool)
    nz = meta.get("noise") or {"kind": "poisson", "lam": 1.0}
    noise = NoiseModel(nz["kind"], nz.get("variance"), nz.get("lam"))
    if np.all(y == np.round(y)):
        y = y.astype(np.int64)
    return ObservationSet(y, observed, noise)


def write_estimates(path, kind, node_means, edge_means, config=None, seed=None,
                    node_se=None, edge_se=None, node_var=None, diagnostics=None):
    rows = list(_count_rows("node_mean", node_means))
    if edge_means is not None:
        rows += _count_rows("edge_mean", edge_means)
    if node_se is not None:
        rows += _count_rows("node_se", node_se)
    if edge_se is not None:
        rows += _count_rows("edge_se", edge_se)
    if node_var is not None:
        rows += _count_rows("node_var", node_var)
    extra = {"diagnostics": _jsonable(diagnostics)} if diagnostics else None
    write_columnar(path, kind, rows, config=config, seed=seed, extra=extra)


def read_estimates(path):
    """Return (meta, dict block -> dense array)."""
    meta, rows = read_columnar(path)
    b = _collect(rows)
    out = {}
    for block, entries in b.items():
        keys = np.array(list(entries.keys()))
        shape = tuple(keys.max(axis=0) + 1)
        out[block] = _dense(entries, shape, float, block, path)
    return meta, out


# plain tables (EM traces, benchmarks) ------------------------------------

def write_table(path, kind, columns, rows, config=None, seed=None):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# gcgm-table v{FORMAT_VERSION}\n")
        fh.write(f"# kind: {kind}\n")
        fh.write(f"# seed: {'' if seed is None else int(seed)}\n")
        fh.write(f"# config: {json.dumps(_jsonable(config or {}), sort_keys=True)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(x) if isinstance(x, (float, np.floating, int, np.integer))
                        and not isinstance(x, bool) else x for x in r])


def read_table(path):
    """Return (meta, columns, rows) with numeric fields parsed."""
    with open(path, encoding="utf-8", newline="") as fh:
        meta, lineno = _read_header(fh, path)
        reader = csv.reader(fh)
        columns = next(reader, None)
        if columns is None:
            raise FormatError(f"{path}:{lineno + 1}: missing column header")
        rows = []
        for k, rec in enumerate(reader, start=lineno + 2):
            parsed = []
            for x in rec:
                try:
                    parsed.append(_parse(x, f"{path}:{k}"))
                except FormatError:
                    parsed.append(x)
            rows.append(parsed)
    return meta, columns, rows


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj
