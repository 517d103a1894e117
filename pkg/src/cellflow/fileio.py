"""Bit-exact file formats shared by the CLI stages.

CSV files are UTF-8 with a header row, '.' decimals, no index column, and
matrices laid out cells x features.  Floats are written with shortest
round-trip repr so identical arrays always serialize to identical bytes.
Trajectories use JSON-lines records {cell_id, branch?, times, path, mass};
checkpoints are JSON with flat parameter arrays and a format version.
"""

import json
import os

import numpy as np

from .dynamics import DynamicsModel
from .geometry import GeoAutoencoder
from .numerics import MlpModel

CHECKPOINT_VERSION = 1


class MissingInputError(FileNotFoundError):
    """An upstream stage output that a command needs is absent."""


class FormatError(ValueError):
    """Malformed, shape-incompatible, or version-incompatible input file."""


def _fmt(x):
    return repr(float(x))


def write_matrix_csv(path, X, prefix="c", header=None):
    X = np.asarray(X, dtype=np.float64)
    if header is None:
        width = max(len(str(X.shape[1] - 1)), 1)
        header = [f"{prefix}{i:0{width}d}" for i in range(X.shape[1])]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in X:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_matrix_csv(path):
    if not os.path.exists(path):
        raise MissingInputError(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        try:
            data = [[float(v) for v in line.strip().split(",")] for line in fh if line.strip()]
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    X = np.array(data, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != len(header):
        raise FormatError(f"{path}: ragged rows or header mismatch")
    return X, header


def write_labels_csv(path, timepoints, branches=None, times=None):
    n = len(timepoints)
    branches = np.full(n, -1) if branches is None else branches
    times = np.asarray(timepoints, dtype=float) if times is None else times
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("timepoint,branch,time\n")
        for t, b, gt in zip(timepoints, branches, times):
            fh.write(f"{int(t)},{int(b)},{_fmt(gt)}\n")


def read_labels_csv(path):
    if not os.path.exists(path):
        raise MissingInputError(path)
    tps, brs, tms = [], [], []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header != ["timepoint", "branch", "time"]:
            raise FormatError(f"{path}: expected header timepoint,branch,time")
        for line in fh:
            if not line.strip():
                continue
            t, b, gt = line.strip().split(",")
            tps.append(int(t))
            brs.append(int(b))
            tms.append(float(gt))
    return np.array(tps), np.array(brs), np.array(tms)


def read_int_csv(path, column):
    if not os.path.exists(path):
        raise MissingInputError(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if column not in header:
            raise FormatError(f"{path}: missing column {column!r}")
        idx = header.index(column)
        vals = [int(line.strip().split(",")[idx]) for line in fh if line.strip()]
    return np.array(vals, dtype=np.int64)


def write_int_csv(path, values, column):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(column + "\n")
        for v in values:
            fh.write(f"{int(v)}\n")


def read_lr_pairs(path, gene_names):
    """Two-column text of gene identifiers (names or integer indices)."""
    if not os.path.exists(path):
        raise MissingInputError(path)
    index = {name: i for i, name in enumerate(gene_names)}
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip().replace(",", " ")
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise FormatError(f"{path}:{ln}: expected two columns")
            resolved = []
            for tok in parts:
                if tok in index:
                    resolved.append(index[tok])
                elif tok.lstrip("-").isdigit():
                    resolved.append(int(tok))
                else:
                    raise FormatError(f"{path}:{ln}: unknown gene {tok!r}")
            pairs.append(tuple(resolved))
    return pairs


def write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    if not os.path.exists(path):
        raise MissingInputError(path)
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# trajectories


def write_trajectories(path, paths, times, masses=None, branches=None):
    """JSON-lines records, one per cell: cell_id, branch?, times, path, mass.

    ``masses`` may be per-cell scalars or per-cell-per-step arrays; scalars
    are broadcast along the time grid.
    """
    paths = np.asarray(paths, dtype=np.float64)
    n, steps_p1, _ = paths.shape
    times = np.asarray(times, dtype=np.float64)
    if masses is None:
        masses = np.ones((n, steps_p1))
    masses = np.asarray(masses, dtype=np.float64)
    if masses.ndim == 1:
        masses = np.repeat(masses[:, None], steps_p1, axis=1)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i in range(n):
            rec = {"cell_id": int(i)}
            if branches is not None and int(branches[i]) >= 0:
                rec["branch"] = int(branches[i])
            rec["times"] = [float(t) for t in times]
            rec["path"] = [[float(v) for v in row] for row in paths[i]]
            rec["mass"] = [float(v) for v in masses[i]]
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_trajectories(path):
    if not os.path.exists(path):
        raise MissingInputError(path)
    recs = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                recs.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{ln}: {exc}") from exc
    if not recs:
        return np.zeros((0, 0, 0)), np.zeros(0), np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    times = np.array(recs[0]["times"])
    paths = np.array([r["path"] for r in recs], dtype=np.float64)
    masses = np.array([r["mass"] for r in recs], dtype=np.float64)
    branches = np.array([r.get("branch", -1) for r in recs], dtype=np.int64)
    if paths.ndim != 3:
        raise FormatError(f"{path}: inconsistent path shapes")
    return paths, times, masses, branches


# ---------------------------------------------------------------------------
# checkpoints


def _mlp_to_dict(m):
    return {"layer_sizes": list(m.layer_sizes),
            "activations": list(m.activations),
            "params": [float(v) for p in m.params() for v in p.ravel()]}


def _mlp_from_dict(d):
    sizes = tuple(int(s) for s in d["layer_sizes"])
    acts = tuple(d["activations"])
    flat = np.array(d["params"], dtype=np.float64)
    weights, biases = [], []
    pos = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[pos:pos + fan_in * fan_out].reshape(fan_out, fan_in))
        pos += fan_in * fan_out
        biases.append(flat[pos:pos + fan_out].copy())
        pos += fan_out
    if pos != flat.size:
        raise FormatError("parameter count does not match layer sizes")
    return MlpModel(sizes, weights, biases, acts)


def save_dynamics(path, model, config_echo, loss_history, seed):
    write_json(path, {
        "format_version": CHECKPOINT_VERSION,
        "kind": "dynamics",
        "drift": _mlp_to_dict(model.drift),
        "diffusion": _mlp_to_dict(model.diffusion),
        "growth": _mlp_to_dict(model.growth),
        "momentum_beta": model.momentum_beta,
        "momentum_gamma": model.momentum_gamma,
        "mode": model.mode,
        "loss_history": [float(v) for v in loss_history],
        "config": config_echo,
        "seed": int(seed),
    })


def load_dynamics(path):
    d = read_json(path)
    if d.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {d.get('format_version')} "
                          f"!= {CHECKPOINT_VERSION}")
    if d.get("kind") != "dynamics":
        raise FormatError(f"{path}: not a dynamics checkpoint")
    model = DynamicsModel(drift=_mlp_from_dict(d["drift"]),
                          diffusion=_mlp_from_dict(d["diffusion"]),
                          growth=_mlp_from_dict(d["growth"]),
                          momentum_beta=float(d["momentum_beta"]),
                          momentum_gamma=float(d["momentum_gamma"]),
                          mode=d["mode"])
    return model, d


def save_autoencoder(path, ae, config_echo, seed):
    write_json(path, {
        "format_version": CHECKPOINT_VERSION,
        "kind": "gaga",
        "encoder": _mlp_to_dict(ae.encoder),
        "decoder": _mlp_to_dict(ae.decoder),
        "lambda_geo": ae.lambda_geo,
        "lambda_rec": ae.lambda_rec,
        "loss_history": [float(v) for v in ae.loss_history],
        "config": config_echo,
        "seed": int(seed),
    })


def load_autoencoder(path):
    d = read_json(path)
    if d.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {d.get('format_version')} "
                          f"!= {CHECKPOINT_VERSION}")
    if d.get("kind") != "gaga":
        raise FormatError(f"{path}: not an autoencoder checkpoint")
    return GeoAutoencoder(encoder=_mlp_from_dict(d["encoder"]),
                          decoder=_mlp_from_dict(d["decoder"]),
                          lambda_geo=float(d["lambda_geo"]),
                          lambda_rec=float(d["lambda_rec"]),
                          loss_history=list(d["loss_history"]))


# ---------------------------------------------------------------------------
# SVG

_PALETTE = ["#4269d0", "#efb118", "#ff725c", "#6cc5b0", "#3ca951",
            "#ff8ab7", "#a463f2", "#97bbf5", "#9c6b4e", "#9498a0"]


def write_svg(path, points, point_groups, polylines, width=640, height=480):
    """Scatter colored by group with overlaid trajectory polylines.

    Deterministic output: coordinates are formatted to fixed precision and
    elements are emitted in input order.
    """
    points = np.asarray(points, dtype=np.float64)
    allx = [points[:, 0]] + [np.asarray(p)[:, 0] for p in polylines]
    ally = [points[:, 1]] + [np.asarray(p)[:, 1] for p in polylines]
    xs = np.concatenate(allx) if allx else np.zeros(1)
    ys = np.concatenate(ally) if ally else np.zeros(1)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    pad_x = 0.05 * (x1 - x0 or 1.0)
    pad_y = 0.05 * (y1 - y0 or 1.0)
    x0, x1 = x0 - pad_x, x1 + pad_x
    y0, y1 = y0 - pad_y, y1 + pad_y

    def sx(v):
        return (v - x0) / (x1 - x0) * width

    def sy(v):
        return height - (v - y0) / (y1 - y0) * height

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">']
    parts.append(f'<rect width="{width}" height="{height}" fill="white"/>')
    for (x, y), g in zip(points, point_groups):
        color = _PALETTE[int(g) % len(_PALETTE)]
        parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="2.5" '
                     f'fill="{color}" fill-opacity="0.6"/>')
    for poly in polylines:
        poly = np.asarray(poly, dtype=np.float64)
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in poly)
        parts.append(f'<polyline points="{pts}" fill="none" stroke="#222222" '
                     f'stroke-width="1.0" stroke-opacity="0.5"/>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")
