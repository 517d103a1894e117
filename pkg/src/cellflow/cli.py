"""Config-driven command-line pipeline.

Subcommands: simulate, embed, features, train, infer, evaluate, plot.
Every stage reads/writes fixed file names inside the output directory and
drops a ``<stage>_config.json`` echo of the fully-resolved configuration
next to its outputs, so reruns are reproducible byte for byte.

Exit codes: 0 ok, 2 config error, 3 missing input, 4 numeric failure,
5 malformed or incompatible input (shape/version mismatch).
"""

import argparse
import copy
import os
import sys

import numpy as np

from . import fileio, geometry, spatial, synthdata, training, transport
from . import dynamics as dyn
from . import evaluation as ev
from .fileio import FormatError, MissingInputError
from .numerics import NumericError, make_rng


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG = {
    "seed": None,  # mandatory
    "data": {
        "dataset": "arc",        # arc|branching|dying|growing|trifurcation|s_shape
        "n": 150,                # toy sets: cells at the first timepoint
        "timepoints": 4,
        "n_genes": 100,
        "n_cells": 500,
        "steps": 120,
        "subsample": 315,        # s_shape only
        "dropout_p": 0.0,
        "library_scale_range": [1.0, 1.0],
        "poisson": False,
    },
    "geometry": {
        "knn_k": 10,
        "diffusion_t": 8,
        "latent_dim": 2,
        "hidden": [64, 64],
        "epochs": 200,
        "batch_size": 256,
        "lambda_geo": 1.0,
        "lambda_rec": 0.1,
        "lr": 0.001,
        "use_features": False,   # joint gene-spatial embedding
        "spatial_scale": 0.2,
        "spatial_latent_dim": 2,
    },
    "spatial": {
        "k": 5,
        "hops": 3,
        "max_dist": None,
        "expr_pca_dim": 20,
        "output_dim": 10,
        "lr_pairs_file": None,
    },
    "dynamics": {
        "hidden": [64, 64],
        "momentum_beta": 0.0,
        "momentum_gamma": 0.9,
        "sigma_init": 0.1,
        "ode_method": "euler",
        "n_steps": 10,
    },
    "training": {
        "lambda_m": 1.0,
        "lambda_e": 0.01,
        "lambda_d": 0.1,
        "k_density": 5,
        "h_margin": None,
        "batch_size": 64,
        "iterations": 500,
        "lr": 0.01,
        "mode": "local",
        "solver": "ode",
        "growth_enabled": False,
        "uot_eps": 0.05,
        "uot_lam1": 0.5,
        "uot_lam2": 50.0,
        "growth_lr_scale": 0.1,
        "pretrain_epochs": 300,
    },
    "eval": {
        "w1_cap": 1000,
        "branches": 0,           # >0 adds trajectory-error rows with K branches
        "space_tag": "latent",
    },
    "output": {"dir": "out"},
}


def _merge_section(name, defaults, given):
    if not isinstance(given, dict):
        raise ConfigError(f"section {name!r} must be an object")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    out = copy.deepcopy(defaults)
    out.update(given)
    return out


def load_config(path, seed=None, out=None):
    """Resolve a config file against the defaults; unknown keys are rejected."""
    raw = fileio.read_json(path) if path else {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    cfg = {"seed": raw.get("seed")}
    for section, defaults in DEFAULT_CONFIG.items():
        if section == "seed":
            continue
        cfg[section] = _merge_section(section, defaults, raw.get(section, {}))
    if seed is not None:
        cfg["seed"] = int(seed)
    if out is not None:
        cfg["output"]["dir"] = out
    if cfg["seed"] is None:
        raise ConfigError("seed is mandatory (config key 'seed' or --seed)")
    cfg["seed"] = int(cfg["seed"])
    return cfg


def _out_dir(cfg):
    d = cfg["output"]["dir"]
    os.makedirs(d, exist_ok=True)
    return d


def _echo(cfg, stage):
    fileio.write_json(os.path.join(_out_dir(cfg), f"{stage}_config.json"), cfg)


def _path(cfg, name):
    return os.path.join(_out_dir(cfg), name)


# ---------------------------------------------------------------------------
# stages


def cmd_simulate(cfg):
    d = cfg["data"]
    seed = cfg["seed"]
    kind = d["dataset"]
    if kind in ("arc", "branching", "dying", "growing"):
        ds = synthdata.toy_sets(kind, d["n"], d["timepoints"], make_rng(seed, 3))
    elif kind == "trifurcation":
        ds = synthdata.trifurcation(seed=seed, n_cells=d["n_cells"],
                                    n_genes=d["n_genes"], steps=d["steps"],
                                    n_timepoints=d["timepoints"])
    elif kind == "s_shape":
        ds = synthdata.s_shape(seed=seed, n_genes=d["n_genes"], steps=d["steps"],
                               subsample=d["subsample"],
                               n_timepoints=d["timepoints"])
    else:
        raise ConfigError(f"unknown dataset {kind!r}")
    expr = ds.expression
    lo, hi = d["library_scale_range"]
    if (lo, hi) != (1.0, 1.0) or d["dropout_p"] > 0 or d["poisson"]:
        expr = synthdata.technical_noise(expr, (lo, hi), d["dropout_p"],
                                         make_rng(seed, 5), poisson=d["poisson"])
    prefix = "g" if kind in ("trifurcation", "s_shape") else "x"
    fileio.write_matrix_csv(_path(cfg, "expression.csv"), expr, prefix=prefix)
    fileio.write_labels_csv(_path(cfg, "labels.csv"), ds.timepoints, ds.branches, ds.times)
    manifest = {"dataset": kind, "seed": seed, "n_cells": int(expr.shape[0]),
                "n_features": int(expr.shape[1]),
                "timepoints": [int(t) for t in np.unique(ds.timepoints)],
                "meta": {k: (int(v) if isinstance(v, (int, np.integer)) else v)
                         for k, v in ds.meta.items()}}
    fileio.write_json(_path(cfg, "manifest.json"), manifest)
    _echo(cfg, "simulate")
    return 0


def _train_gaga_on(X, g, seed):
    op = geometry.diffusion_operator(X, k=g["knn_k"], t=g["diffusion_t"])
    targets = geometry.potential_distances(op)
    gcfg = geometry.GagaConfig(latent_dim=g["latent_dim"], hidden=tuple(g["hidden"]),
                               epochs=g["epochs"], batch_size=g["batch_size"],
                               lambda_geo=g["lambda_geo"], lambda_rec=g["lambda_rec"],
                               lr=g["lr"], seed=seed)
    return geometry.train_gaga(X, targets, gcfg)


def cmd_embed(cfg):
    g = cfg["geometry"]
    X, _ = fileio.read_matrix_csv(_path(cfg, "expression.csv"))
    ae = _train_gaga_on(X, g, cfg["seed"])
    Z = geometry.encode(ae, X)
    fileio.save_autoencoder(_path(cfg, "gaga.json"), ae, cfg, cfg["seed"])
    if g["use_features"]:
        S, _ = fileio.read_matrix_csv(_path(cfg, "features.csv"))
        if S.shape[0] != X.shape[0]:
            raise FormatError("features.csv row count does not match expression.csv")
        gs = dict(g, latent_dim=g["spatial_latent_dim"])
        ae_s = _train_gaga_on(S, gs, cfg["seed"] + 1)
        Zs = geometry.encode(ae_s, S)
        fileio.save_autoencoder(_path(cfg, "gaga_spatial.json"), ae_s, cfg, cfg["seed"])
        Z = spatial.joint_embed(Z, Zs, g["spatial_scale"])
    fileio.write_matrix_csv(_path(cfg, "latent.csv"), Z, prefix="z")
    _echo(cfg, "embed")
    return 0


def cmd_features(cfg):
    sp = cfg["spatial"]
    X, gene_names = fileio.read_matrix_csv(_path(cfg, "expression.csv"))
    L, _ = fileio.read_matrix_csv(_path(cfg, "locations.csv"))
    types = fileio.read_int_csv(_path(cfg, "cell_types.csv"), "cell_type")
    if L.shape[0] != X.shape[0] or types.shape[0] != X.shape[0]:
        raise FormatError("locations/cell_types do not match expression rows")
    pairs = []
    if sp["lr_pairs_file"]:
        pairs = fileio.read_lr_pairs(sp["lr_pairs_file"], gene_names)
    ds = spatial.SpatialDataset(expression=X, locations=L, cell_types=types,
                                lr_pairs=pairs)
    fcfg = spatial.SpatialFeaturesConfig(k=sp["k"], hops=sp["hops"],
                                         max_dist=sp["max_dist"],
                                         expr_pca_dim=sp["expr_pca_dim"],
                                         output_dim=sp["output_dim"])
    feats = spatial.assemble_spatial_features(ds, fcfg)
    fileio.write_matrix_csv(_path(cfg, "features.csv"), feats.S, prefix="s")
    fileio.write_json(_path(cfg, "features_meta.json"),
                      {"block_spans": {k: list(v) for k, v in feats.block_spans.items()}})
    _echo(cfg, "features")
    return 0


def _load_latents(cfg):
    Z, _ = fileio.read_matrix_csv(_path(cfg, "latent.csv"))
    tps, branches, _ = fileio.read_labels_csv(_path(cfg, "labels.csv"))
    if Z.shape[0] != tps.shape[0]:
        raise FormatError("latent.csv rows do not match labels.csv")
    labels = np.unique(tps)
    Z_list = [Z[tps == t] for t in labels]
    return Z, tps, branches, labels.astype(np.float64), Z_list


def _train_config(cfg):
    t, d = cfg["training"], cfg["dynamics"]
    return training.TrainConfig(
        lambda_m=t["lambda_m"], lambda_e=t["lambda_e"], lambda_d=t["lambda_d"],
        k_density=t["k_density"], h_margin=t["h_margin"],
        batch_size=t["batch_size"], iterations=t["iterations"], lr=t["lr"],
        seed=cfg["seed"], mode=t["mode"], solver=t["solver"],
        growth_enabled=t["growth_enabled"], uot_eps=t["uot_eps"],
        uot_lam1=t["uot_lam1"], uot_lam2=t["uot_lam2"],
        n_steps=d["n_steps"], momentum_beta=d["momentum_beta"],
        momentum_gamma=d["momentum_gamma"], hidden=tuple(d["hidden"]),
        ode_method=d["ode_method"], sigma_init=d["sigma_init"],
        growth_lr_scale=t["growth_lr_scale"], pretrain_epochs=t["pretrain_epochs"])


def cmd_train(cfg):
    _, _, _, times, Z_list = _load_latents(cfg)
    tcfg = _train_config(cfg)
    model, history = training.train(Z_list, tcfg, times=times)
    fileio.save_dynamics(_path(cfg, "model.json"), model, cfg, history, cfg["seed"])
    with open(_path(cfg, "loss_history.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("iteration,loss\n")
        for i, v in enumerate(history):
            fh.write(f"{i},{repr(float(v))}\n")
    _echo(cfg, "train")
    return 0


def cmd_infer(cfg):
    model, _ = fileio.load_dynamics(_path(cfg, "model.json"))
    _, tps, branches, times, Z_list = _load_latents(cfg)
    n_steps_unit = cfg["dynamics"]["n_steps"]
    t0, t1 = float(times[0]), float(times[-1])
    n_steps = max(1, int(round(n_steps_unit * (t1 - t0))))
    rng = make_rng(cfg["seed"], 89) if model.mode == "sde" else None
    method = cfg["dynamics"]["ode_method"] if model.mode == "ode" else "euler"
    traj = dyn.integrate(model, Z_list[0], t0, t1, n_steps, rng=rng, method=method)
    masses = np.stack([dyn.eval_growth(model, traj.paths[:, k], traj.times[k])
                       for k in range(traj.paths.shape[1])], axis=1)
    first_tp = tps == tps.min()
    fileio.write_trajectories(_path(cfg, "trajectories.jsonl"), traj.paths,
                              traj.times, masses, branches[first_tp])
    _echo(cfg, "infer")
    return 0


def cmd_evaluate(cfg):
    e = cfg["eval"]
    paths, ttimes, masses, _ = fileio.read_trajectories(_path(cfg, "trajectories.jsonl"))
    if paths.size == 0:
        raise FormatError("trajectories.jsonl holds no records")
    _, tps, _, times, Z_list = _load_latents(cfg)
    rows = []
    seed = cfg["seed"]
    for idx, t in enumerate(times):
        k = int(np.argmin(np.abs(ttimes - t)))
        pred = paths[:, k, :]
        rows.append((t, "w1", ev.w1(pred, Z_list[idx], cap=e["w1_cap"], seed=seed)))
        rows.append((t, "mmd_gaussian", ev.mmd_gaussian(pred, Z_list[idx])))
        rows.append((t, "mmd_mean", ev.mmd_mean(pred, Z_list[idx])))
    if e["branches"] > 0:
        batch = dyn.TrajectoryBatch(paths=paths, times=ttimes,
                                    masses=masses[:, -1], drift_evals=np.zeros((paths.shape[0], 0, paths.shape[2])))
        summary = ev.branch_means(batch, e["branches"], seed=seed)
        mean, std = ev.trajectory_error(np.concatenate(Z_list), summary)
        rows.append((times[-1], "trajectory_error_mean", mean))
        rows.append((times[-1], "trajectory_error_std", std))
    with open(_path(cfg, "metrics.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t,metric,value,seed\n")
        for t, metric, value in rows:
            fh.write(f"{repr(float(t))},{metric},{repr(float(value))},{seed}\n")
    _echo(cfg, "evaluate")
    return 0


def cmd_plot(cfg):
    Z, _ = fileio.read_matrix_csv(_path(cfg, "latent.csv"))
    tps, _, _ = fileio.read_labels_csv(_path(cfg, "labels.csv"))
    polylines = []
    tpath = _path(cfg, "trajectories.jsonl")
    if os.path.exists(tpath):
        paths, _, _, _ = fileio.read_trajectories(tpath)
        polylines = [paths[i, :, :2] for i in range(paths.shape[0])]
    fileio.write_svg(_path(cfg, "plot.svg"), Z[:, :2], tps, polylines)
    _echo(cfg, "plot")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "embed": cmd_embed,
    "features": cmd_features,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "plot": cmd_plot,
}


def build_parser():
    p = argparse.ArgumentParser(prog="cellflow", description=__doc__)
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", default=None, help="JSON config path")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", default=None, help="override output directory")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MissingInputError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except FormatError as exc:
        print(f"input format error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
