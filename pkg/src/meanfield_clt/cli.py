"""Command-line front end.

    meanfield-clt <pipeline> --config cfg.json [--seed S] [--out DIR]
                  [--threads T] [--override key=value ...]
    meanfield-clt emit-plots <bundle-dir>

Exit codes: 0 success, 2 invalid configuration or model, 3 numerical failure.
"""

import argparse
import copy
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import jsonschema
import numpy as np

from . import fluctuation as fl
from .girsanov import martingale_experiment
from .io import save_path_cache, write_csv, write_json, write_manifest
from .limitlaw import SingularResolvent, predict_limit_mixture
from .model import ModelError, SampleableMeasure, validate_model
from .plots import MissingArtifacts, emit_plots
from .presets import PRESETS, build_preset
from .simulate import SimConfig, SimulationError, simulate_interacting, yN_rate_experiment
from .stats import KS_CRIT_01, gaussian_mixture_cdf, ks_statistic, mixture_quantiles, variance_with_se
from .symmstat import ProductKernel, dm_convergence_experiment, isometry_check

PIPELINES = ("simulate", "martingale", "fluctuate", "predict", "compare", "symmstat", "finance-demo", "rates")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_POS_INT = {"type": "integer", "minimum": 1}
_POS_NUM = {"type": "number", "exclusiveMinimum": 0}

CONFIG_SCHEMA = _obj(
    {
        "pipeline": {"enum": list(PIPELINES)},
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "threads": _POS_INT,
        "model": _obj({"preset": {"enum": list(PRESETS)}, "params": {"type": "object"}}, ["preset"]),
        "sim": _obj({
            "n_particles": _POS_INT, "ensemble_size": _POS_INT, "dt": _POS_NUM, "horizon": _POS_NUM,
            "replication_count": _POS_INT, "mc_size": _POS_INT,
        }),
        "phi": _obj({"id": {"enum": list(fl.FUNCTIONALS)}, "params": {"type": "object"}}, ["id"]),
        "validation": _obj({"probes": _POS_INT, "enforce": {"type": "boolean"}}),
        "fluctuation": _obj({"mode": {"enum": ["pooled", "conditional"]}, "common_rep": {"type": "integer", "minimum": 0}}),
        "limit": _obj({
            "common_paths": _POS_INT, "nystrom_size": {"type": "integer", "minimum": 2},
            "m2": {"type": ["integer", "null"], "minimum": 2}, "bootstrap": {"type": "integer", "minimum": 0},
            "quad_samples": _POS_INT, "grid_points": {"type": "integer", "minimum": 3},
        }),
        "martingale": _obj({"n_common": {"type": ["integer", "null"], "minimum": 1}, "quad_samples": _POS_INT}),
        "rates": _obj({"n_grid": {"type": "array", "items": _POS_INT, "minItems": 2}, "reps": {"type": "integer", "minimum": 2}}),
        "symmstat": _obj({
            "orders": {"type": "array", "items": {"type": "integer", "minimum": 1, "maximum": 3}, "minItems": 1},
            "n_grid": {"type": "array", "items": _POS_INT, "minItems": 1}, "reps": {"type": "integer", "minimum": 2},
            "kernel": {"enum": ["normal_score", "sign"]}, "isometry_size": {"type": "integer", "minimum": 100},
        }),
        "finance": _obj({"groups": {"type": "integer", "minimum": 2}, "per_group": {"type": "integer", "minimum": 2},
                         "pooled": {"type": "integer", "minimum": 2}}),
        "simulate": _obj({"cache": {"type": "boolean"}}),
    },
    ["model"],
)

DEFAULTS = {
    "seed": 0,
    "output_dir": "meanfield_out",
    "threads": 1,
    "sim": {"n_particles": 100, "ensemble_size": 1000, "dt": 0.01, "horizon": 1.0, "replication_count": 100},
    "phi": {"id": "terminal", "params": {}},
    "validation": {"probes": 100, "enforce": True},
    "fluctuation": {"mode": "pooled", "common_rep": 0},
    "limit": {"common_paths": 10, "nystrom_size": 400, "m2": None, "bootstrap": 0, "quad_samples": 8, "grid_points": 201},
    "martingale": {"n_common": None, "quad_samples": 8},
    "rates": {"n_grid": [25, 50, 100, 200, 400], "reps": 100},
    "symmstat": {"orders": [1, 2], "n_grid": [2000], "reps": 5000, "kernel": "normal_score", "isometry_size": 1_000_000},
    "finance": {"groups": 10, "per_group": 50, "pooled": 200},
    "simulate": {"cache": False},
}

UNITS = {
    "time": "model time units", "node": "grid index", "particle": "particle id", "rep": "replication id",
    "value": "sqrt(N)-scaled deviation of the empirical mean of phi (units of phi times sqrt(particles))",
    "N": "particles", "phi_id": "label", "common_path_id": "common path id", "replication_id": "replication id",
    "m_hat": "units of phi", "m_hat_se": "units of phi", "sigma": "units of phi times sqrt(particles)",
    "x": "units of phi times sqrt(particles)", "cdf": "probability", "J1": "log-likelihood (dimensionless)",
    "J2": "log-likelihood (dimensionless)", "H": "likelihood ratio (dimensionless)",
    "mean_sq_error": "squared state units", "se": "squared state units", "ks_distance": "probability",
    "theoretical_quantile": "units of phi times sqrt(particles)", "empirical_quantile": "units of phi times sqrt(particles)",
    "mean_sq": "dimensionless", "exact": "dimensionless", "M": "Nystrom paths",
    "phi_centered_norm": "units of phi", "bootstrap_se": "units of phi times sqrt(particles)",
    "condition_number": "dimensionless", "trace_A": "dimensionless", "trace_A2": "dimensionless",
    "trace_cross": "dimensionless", "frobenius_sq": "dimensionless",
    "sigma_half_delta": "units of phi times sqrt(particles)",
}


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config


def _deep_merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "params":
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _apply_override(cfg, item):
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    node = cfg
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path {key!r} crosses a non-object")
    node[parts[-1]] = val


def load_config(path, overrides=(), seed=None, out=None, threads=None, pipeline=None):
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    for item in overrides or ():
        _apply_override(raw, item)
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["output_dir"] = out
    if pipeline is not None:
        raw["pipeline"] = pipeline
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    cfg = _deep_merge(DEFAULTS, raw)
    if threads is None:
        threads = raw.get("threads") or int(os.environ.get("MEANFIELD_CLT_THREADS", "0") or 0) or DEFAULTS["threads"]
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    cfg["threads"] = int(threads)
    return cfg


def _sim_config(cfg):
    s = cfg["sim"]
    try:
        return SimConfig(seed=cfg["seed"], **s)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"sim: {exc}") from None


def _phi(cfg):
    try:
        return fl.make_functional(cfg["phi"]["id"], **cfg["phi"].get("params", {}))
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"phi: {exc}") from None


# ------------------------------------------------------------------ pipelines


def _fluct_rows(samples):
    return [(s.value, s.n_particles, s.phi_id, s.common_path_id, s.replication_id, s.m_hat, s.m_hat_se) for s in samples]


FLUCT_HEADER = ["value", "N", "phi_id", "common_path_id", "replication_id", "m_hat", "m_hat_se"]


def _run_simulate(spec, sc, cfg, out, threads):
    def one(r):
        return simulate_interacting(spec, sc, r)

    with ThreadPoolExecutor(threads) as pool:
        runs = list(pool.map(one, range(sc.replication_count)))
    d, m = spec.dim_x, spec.dim_y
    rows, crow = [], []
    for r, ns in enumerate(runs):
        st = ns.particles.states
        for node, t in enumerate(sc.grid):
            crow.append([r, node, t, *ns.common[node]])
            for i in range(st.shape[0]):
                rows.append([r, node, t, i, *st[i, node]])
    files = [
        write_csv(out / "paths.csv", ["rep", "node", "time", "particle"] + [f"x{j}" for j in range(d)], rows),
        write_csv(out / "common.csv", ["rep", "node", "time"] + [f"y{j}" for j in range(m)], crow),
    ]
    if cfg["simulate"]["cache"]:
        files.append(save_path_cache(out / "paths_rep0.npz", runs[0].particles, runs[0].common, {"rep": 0}))
    units = {f"x{j}": "state units" for j in range(d)} | {f"y{j}": "common-factor units" for j in range(m)}
    return files, {}, units


def _run_martingale(spec, sc, cfg, out, threads):
    mc = cfg["martingale"]
    rep = martingale_experiment(spec, sc, n_common=mc["n_common"], quad_samples=mc["quad_samples"], threads=threads)
    f1 = write_csv(out / "martingale.csv", ["rep", "common_rep", "J1", "J2", "H"],
                   [(r.rep, r.common_rep, r.J1, r.J2, r.H) for r in rep.rows])
    summary = rep.summary()
    f2 = write_json(out / "martingale.json", summary)
    return [f1, f2], summary, {"common_rep": "common path id"}


def _fluct(spec, sc, cfg, phi, threads):
    f = cfg["fluctuation"]
    return fl.fluctuation_ensemble(spec, sc, phi, f["mode"], common_rep=f["common_rep"], threads=threads)


def _fluct_summary(vals, samples):
    var, var_se = variance_with_se(vals)
    return {"count": len(vals), "mean": float(vals.mean()), "mean_se": float(vals.std(ddof=1) / np.sqrt(len(vals))),
            "variance": var, "variance_se": var_se, "max_m_hat_se": float(max(s.m_hat_se for s in samples))}


def _run_fluctuate(spec, sc, cfg, out, threads):
    phi = _phi(cfg)
    samples = _fluct(spec, sc, cfg, phi, threads)
    vals = fl.values(samples)
    f1 = write_csv(out / "fluctuation.csv", FLUCT_HEADER, _fluct_rows(samples))
    summary = _fluct_summary(vals, samples) | {"mode": cfg["fluctuation"]["mode"], "phi_id": phi.id}
    f2 = write_json(out / "fluctuation.json", summary)
    return [f1, f2], summary, {}


def _predict(spec, sc, cfg, phi, threads, common_paths=None, first=0):
    lim = cfg["limit"]
    R = lim["common_paths"] if common_paths is None else common_paths
    return predict_limit_mixture(spec, sc, phi, R, lim["nystrom_size"], m2=lim["m2"], n_boot=lim["bootstrap"],
                                 first_common=first, threads=threads, quad_samples=lim["quad_samples"])


def _write_prediction(est, cfg, out):
    keys = list(est.paths[0].to_dict())
    f1 = write_csv(out / "limit.csv", keys, [[p.to_dict()[k] for k in keys] for p in est.paths])
    f2 = write_json(out / "limit.json", est.to_dict())
    smax = max(float(est.sigmas.max()), 1e-12)
    xs = np.linspace(-5 * smax, 5 * smax, cfg["limit"]["grid_points"])
    f3 = write_csv(out / "mixture_cdf.csv", ["x", "cdf"], zip(xs, est.cdf(xs)))
    return [f1, f2, f3]


def _run_predict(spec, sc, cfg, out, threads):
    est = _predict(spec, sc, cfg, _phi(cfg), threads)
    files = _write_prediction(est, cfg, out)
    summary = {"sigmas": est.sigmas.tolist(), "mean_sigma": float(est.sigmas.mean())}
    return files, summary, {}


def _run_compare(spec, sc, cfg, out, threads):
    phi = _phi(cfg)
    mode = cfg["fluctuation"]["mode"]
    if mode == "conditional":
        cr = cfg["fluctuation"]["common_rep"]
        est = _predict(spec, sc, cfg, phi, threads, common_paths=1, first=cr)
    else:
        est = _predict(spec, sc, cfg, phi, threads)
    samples = _fluct(spec, sc, cfg, phi, threads)
    vals = fl.values(samples)
    files = _write_prediction(est, cfg, out)
    files.append(write_csv(out / "fluctuation.csv", FLUCT_HEADER, _fluct_rows(samples)))
    sig, w = est.sigmas, est.weights
    ks = ks_statistic(vals, lambda x: gaussian_mixture_cdf(sig, w, x))
    p = (np.arange(1, vals.size + 1) - 0.5) / vals.size
    files.append(write_csv(out / "qq.csv", ["theoretical_quantile", "empirical_quantile"],
                           np.column_stack([mixture_quantiles(sig, w, p), np.sort(vals)])))
    summary = _fluct_summary(vals, samples) | {
        "mode": mode, "ks_distance": ks, "ks_threshold_01": KS_CRIT_01 / np.sqrt(vals.size),
        "predicted_sigmas": sig.tolist(), "predicted_variance": float(np.mean(sig**2)),
    }
    files.append(write_json(out / "compare.json", summary))
    return files, summary, {}


def _run_symmstat(spec, sc, cfg, out, threads):
    s = cfg["symmstat"]
    if s["kernel"] == "sign":
        kern = ProductKernel(np.sign, 1.0)
    else:
        kern = ProductKernel(lambda x: x, 1.0)
    rows = dm_convergence_experiment(kern, SampleableMeasure.gaussian([0.0], [1.0]), s["orders"], s["n_grid"], s["reps"],
                                     seed=cfg["seed"])
    f1 = write_csv(out / "dm.csv", ["k", "n", "reps", "ks_distance"], [(r["k"], r["n"], r["reps"], r["ks_distance"]) for r in rows])
    iso = [(k, *isometry_check(k, kern.h_norm_sq, s["isometry_size"], cfg["seed"])) for k in (1, 2, 3)]
    f2 = write_csv(out / "isometry.csv", ["k", "mean_sq", "se", "exact"], iso)
    summary = {"dm": rows, "isometry": [{"k": k, "mean_sq": a, "se": b, "exact": c} for k, a, b, c in iso]}
    return [f1, f2, write_json(out / "symmstat.json", summary)], summary, {"k": "order", "n": "samples", "reps": "replications", "se": "dimensionless"}


def _run_finance(spec, sc, cfg, out, threads):
    phi = _phi(cfg)
    fin = cfg["finance"]
    pooled = fl.fluctuation_ensemble(spec, sc, phi, "pooled", reps=fin["pooled"], threads=threads)
    groups, rows = [], []
    for g in range(fin["groups"]):
        cr = 10_000 + g  # disjoint from the pooled common paths
        cs = fl.fluctuation_ensemble(spec, sc, phi, "conditional", common_rep=cr, reps=fin["per_group"], threads=threads)
        groups.append(fl.values(cs))
        rows.extend(_fluct_rows(cs))
    dec = fl.variance_decomposition(fl.values(pooled), groups)
    f1 = write_csv(out / "fluctuation.csv", FLUCT_HEADER, _fluct_rows(pooled))
    f2 = write_csv(out / "fluctuation_conditional.csv", FLUCT_HEADER, rows)
    f3 = write_json(out / "finance.json", dec | {"phi_id": phi.id})
    return [f1, f2, f3], dec, {}


def _run_rates(spec, sc, cfg, out, threads):
    r = cfg["rates"]
    rows, (slope, icpt, r2) = yN_rate_experiment(spec, sc, r["n_grid"], r["reps"], threads=threads)
    f1 = write_csv(out / "rates.csv", ["N", "mean_sq_error", "se"], rows)
    summary = {"slope": slope, "intercept": icpt, "r2": r2, "reps": r["reps"], "ensemble_size": sc.ensemble_size}
    return [f1, write_json(out / "rates.json", summary)], summary, {}


RUNNERS = {
    "simulate": _run_simulate, "martingale": _run_martingale, "fluctuate": _run_fluctuate, "predict": _run_predict,
    "compare": _run_compare, "symmstat": _run_symmstat, "finance-demo": _run_finance, "rates": _run_rates,
}


# ------------------------------------------------------------------ entry points


def run(config_path, pipeline=None, overrides=(), seed=None, out=None, threads=None, stderr=None):
    """Run one pipeline; returns the process exit code."""
    err = stderr or sys.stderr
    try:
        cfg = load_config(config_path, overrides, seed, out, threads, pipeline)
        pipeline = cfg.get("pipeline")
        if pipeline not in RUNNERS:
            raise ConfigError("no pipeline given (subcommand or 'pipeline' key)")
        spec = build_preset(cfg["model"]["preset"], cfg["model"].get("params", {}))
        sc = _sim_config(cfg)
        if pipeline in ("fluctuate", "compare", "finance-demo") and sc.m2 < 100 * sc.n_particles:
            raise ConfigError(f"sim.mc_size must be >= 100 * n_particles ({100 * sc.n_particles})")
        _phi(cfg)
        report = validate_model(spec, cfg["validation"]["probes"], cfg["seed"])
    except (ConfigError, ModelError) as exc:
        print(f"error: {exc}", file=err)
        return EXIT_INVALID
    if cfg["validation"]["enforce"] and not report.passed:
        print("error: model validation failed: " + "; ".join(f"{c.name}: {c.message}" for c in report.failures()), file=err)
        return EXIT_INVALID
    out_dir = Path(cfg["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    threads = cfg["threads"]
    try:
        files, summary, units = RUNNERS[pipeline](spec, sc, cfg, out_dir, threads)
    except (SingularResolvent, SimulationError, ArithmeticError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=err)
        write_json(out_dir / "failure.json", {"pipeline": pipeline, "error": str(exc),
                                              "condition_number": getattr(exc, "condition_number", None)})
        return EXIT_NUMERIC
    files.append(write_json(out_dir / "validation.json", report.to_dict()))
    files.append(write_json(out_dir / "units.json", UNITS | units))
    write_manifest(out_dir, cfg, pipeline, cfg["seed"], files, {"summary": summary})
    (out_dir / "run_timestamp.txt").write_text(time.strftime("%Y-%m-%dT%H:%M:%S%z") + "\n", encoding="utf-8")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="meanfield-clt", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in PIPELINES:
        sp = sub.add_parser(name, help=f"run the {name} pipeline")
        sp.add_argument("--config", required=True, help="JSON experiment config")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--threads", type=int, default=None, help="worker threads (env MEANFIELD_CLT_THREADS)")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config key, JSON-parsed value; repeatable")
    ep = sub.add_parser("emit-plots", help="write plot scripts into a bundle directory")
    ep.add_argument("bundle")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "emit-plots":
        try:
            for f in emit_plots(args.bundle):
                print(f)
        except MissingArtifacts as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INVALID
        return EXIT_OK
    return run(args.config, args.command, args.override, args.seed, args.out, args.threads)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
