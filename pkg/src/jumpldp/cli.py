"""
Command-line experiment runner.

    jumpldp <command> --config run.json --out results/ [--seed S] [--threads K]

Every run validates its configuration against ``schemas/config.schema.json``
and a few semantic checks before any computation starts.  It then writes
``manifest.json``, ``results.json`` and CSV sidecars into the output
directory.  Exit codes: 0 success, 2 invalid configuration, 1 runtime error.

The manifest records the configuration (with seed), its SHA-256 and the
library versions.  It carries no timestamps and no thread count.  Results
depend only on the manifest, so reruns reproduce ``results.json`` byte for
byte.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import platform
import sys
from importlib import resources
from pathlib import Path as FilePath

import jsonschema
import numpy as np
import scipy

from . import __version__
from .catalogue import build_model
from .cumulant import classify_nondegeneracy
from .errors import ConfigError, JumpLDPError
from .metric import tightness_diagnostics, write_tightness_csv
from .model import Path, read_path_csv, uniform_grid, write_path_csv
from .ratefn import check_condition_IV, fluid_limit, poisson_floor_path, rate_I
from .simulate import Mode, SimConfig, estimate_tube_probability, run_paths, sup_deviation

log = logging.getLogger("jumpldp")

COMMANDS = ("rate", "fluid", "simulate", "estimate", "diagnose", "ldp-check")
_BLOCK = {"simulate": "simulate", "estimate": "estimate", "ldp-check": "ldp_check"}


def load_schema(name: str = "config") -> dict:
    text = resources.files("jumpldp").joinpath("schemas", f"{name}.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if math.isfinite(x):
            return x
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dump_json(obj, file) -> None:
    text = json.dumps(_json_safe(obj), indent=2, sort_keys=True, allow_nan=False)
    FilePath(file).write_text(text + "\n", encoding="utf-8")


# ---------------------------------------------------------------- validation

def validate_config(raw: dict, command: str, base_dir: FilePath) -> dict:
    """Schema and semantic validation; raises :class:`ConfigError`."""
    try:
        jsonschema.validate(raw, load_schema("config"))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    cfg = copy.deepcopy(raw)
    if cfg.get("command", command) != command:
        raise ConfigError(f"config is for command {cfg['command']!r}, not {command!r}")
    cfg["command"] = command
    cfg.setdefault("T", 1.0)
    cfg.setdefault("dt", 0.01)
    cfg.setdefault("seed", 0)
    try:
        uniform_grid(cfg["T"], cfg["dt"])
    except ValueError as exc:
        raise ConfigError(f"config invalid: {exc}") from None
    try:
        build_model(cfg["model"]["name"], cfg["model"].get("params"))
    except ValueError as exc:
        raise ConfigError(f"config invalid at model: {exc}") from None
    needs_target = command in ("rate", "simulate", "estimate", "ldp-check", "diagnose")
    target = cfg.get("target")
    if needs_target and target is None:
        if command in ("simulate", "diagnose"):
            cfg["target"] = target = {"kind": "fluid"}
        else:
            raise ConfigError(f"config invalid: command {command!r} needs a 'target'")
    if target is not None:
        kind = target["kind"]
        need = {"line": "slope", "constant": "value", "file": "path"}.get(kind)
        if need and need not in target:
            raise ConfigError(f"config invalid at target: kind {kind!r} needs {need!r}")
        if kind == "file":
            p = FilePath(target["path"])
            p = p if p.is_absolute() else base_dir / p
            if not p.is_file():
                raise ConfigError(f"config invalid at target/path: file {str(p)!r} does not exist")
            target["path"] = str(p)
    block = _BLOCK.get(command)
    if block and block not in cfg:
        raise ConfigError(f"config invalid: command {command!r} needs a {block!r} block")
    if command == "diagnose":
        cfg.setdefault("diagnose", {})
    return cfg


# ---------------------------------------------------------------- helpers

def _model(cfg):
    return build_model(cfg["model"]["name"], cfg["model"].get("params"))


def _target(cfg, model) -> Path:
    tgt = cfg["target"]
    T, dt = cfg["T"], cfg["dt"]
    kind = tgt["kind"]
    if kind == "line":
        return Path.line(tgt["slope"], T, dt, model.x0)
    if kind == "constant":
        return Path.constant(tgt["value"], T, dt)
    if kind == "fluid":
        return fluid_limit(model, T, dt)
    if kind == "poisson_floor":
        return poisson_floor_path(model, T, dt)
    return read_path_csv(tgt["path"])


def _sim_config(cfg, block, n, threads, gamma=None):
    return SimConfig(n=int(n), T=cfg["T"], dt=cfg["dt"], seed=int(cfg["seed"]),
                     gamma=block.get("gamma", gamma), lambda_cap=block.get("lambda_cap", 50.0),
                     batch_size=int(cfg.get("batch_size", 4096)), threads=threads)


def _write_rows(file, header, rows):
    with open(file, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def _cell(v):
    if isinstance(v, float):
        return _json_safe(v) if not math.isfinite(v) else repr(v)
    return v


# ---------------------------------------------------------------- commands

def run_rate(cfg, out: FilePath, threads: int = 1) -> list[str]:
    model = _model(cfg)
    phi = _target(cfg, model)
    res = rate_I(model, phi, cfg["T"])
    write_path_csv(phi, out / "target.csv")
    _write_rows(out / "per_step_H.csv", ["time", "H"], res.per_step_H)
    dump_json({"command": "rate", "rate": res.to_dict()}, out / "results.json")
    return ["results.json", "per_step_H.csv", "target.csv"]


def run_fluid(cfg, out: FilePath, threads: int = 1) -> list[str]:
    model = _model(cfg)
    Y = fluid_limit(model, cfg["T"], cfg["dt"])
    write_path_csv(Y, out / "fluid.csv")
    res = rate_I(model, Y)
    dump_json({"command": "fluid", "fluid": {"Y_T": float(Y.values[-1]), "sup_abs": float(np.abs(Y.values).max()),
                                             "rate": res.value}}, out / "results.json")
    return ["results.json", "fluid.csv"]


def run_simulate(cfg, out: FilePath, threads: int = 1) -> list[str]:
    model = _model(cfg)
    blk = cfg["simulate"]
    tilted = bool(blk.get("tilted", False))
    phi = _target(cfg, model)
    sim = _sim_config(cfg, blk, blk["n"], threads, gamma=0.5 if tilted else None)
    keep = int(blk.get("save_paths", 10))
    mode = Mode.TILTED if tilted else Mode.P
    grid = sim.grid
    pv = phi.value_at(grid)

    def summary(r):
        return r.X[:, -1].copy(), sup_deviation(r.X, pv), r.logZ.copy(), r.tau.copy(), r.X[:keep].copy()

    parts = run_paths(model, sim, blk["M"], mode, phi, sim.gamma or 0.0, summary=summary)
    XT = np.concatenate([p[0] for p in parts])
    dev = np.concatenate([p[1] for p in parts])
    logZ = np.concatenate([p[2] for p in parts])
    tau = np.concatenate([p[3] for p in parts])
    sample = np.concatenate([p[4] for p in parts])[:keep]
    _write_rows(out / "paths.csv", ["time"] + [f"path_{i}" for i in range(sample.shape[0])],
                [[repr(float(t))] + [repr(float(v)) for v in sample[:, j]] for j, t in enumerate(grid)])
    result = {
        "mode": mode.value, "n": sim.n, "M": int(XT.size),
        "mean_X_T": math.fsum(XT) / XT.size, "std_X_T": float(np.std(XT, ddof=1)) if XT.size > 1 else 0.0,
        "median_sup_deviation": float(np.median(dev)),
        "mean_logZ": math.fsum(logZ) / logZ.size,
        "tau_hits": int(np.sum(tau >= 0)) if tilted else 0,
    }
    dump_json({"command": "simulate", "simulate": result}, out / "results.json")
    return ["results.json", "paths.csv"]


def run_estimate(cfg, out: FilePath, threads: int = 1) -> list[str]:
    model = _model(cfg)
    blk = cfg["estimate"]
    phi = _target(cfg, model)
    methods = ["crude", "tilted"] if blk.get("method", "tilted") == "both" else [blk.get("method", "tilted")]
    target_rate = -rate_I(model, phi, cfg["T"]).value
    reports = []
    for j, method in enumerate(methods):
        sim = _sim_config(cfg, blk, blk["n"], threads)
        rep = estimate_tube_probability(model, phi, blk["delta"], sim, blk["M"], method,
                                        start=j * blk["M"], target_rate=target_rate)
        reports.append(rep.to_dict())
    dump_json({"command": "estimate", "estimates": reports}, out / "results.json")
    return ["results.json"]


def run_ldp_check(cfg, out: FilePath, threads: int = 1) -> list[str]:
    """Tube estimates over an ``n`` sweep and the decay-rate comparison.

    ``gap`` is ``|-n^{-1} log p_hat - tube_rate|``.  ``tube_rate`` defaults
    to ``I_T(target)``, the rate of the target path itself.  That is only an
    upper bound for the infimum over the tube, so configs should supply
    the tube infimum when it is known.  The fitted slope of ``log p_hat``
    against ``n`` estimates ``-tube_rate``.
    """
    model = _model(cfg)
    blk = cfg["ldp_check"]
    phi = _target(cfg, model)
    I_phi = rate_I(model, phi, cfg["T"]).value
    tube_rate = float(blk.get("tube_rate", I_phi))
    crude_max = int(blk.get("crude_max_n", min(blk["n_list"])))
    rows, table = [], []
    offset = 0
    for n in blk["n_list"]:
        sim = _sim_config(cfg, blk, n, threads)
        ests = {}
        for method in ("tilted", "crude"):
            if method == "crude" and n > crude_max:
                continue
            ests[method] = estimate_tube_probability(model, phi, blk["delta"], sim, blk["M"], method,
                                                     start=offset, target_rate=-I_phi)
            offset += blk["M"]
        for method, rep in ests.items():
            gap = abs(-rep.log_rate - tube_rate) if math.isfinite(rep.log_rate) else math.inf
            row = {"n": int(n), "method": method, "p_hat": rep.p_hat, "std_err": rep.std_err,
                   "log_rate": rep.log_rate, "target_rate": -I_phi, "tube_rate": tube_rate, "gap": gap,
                   "clamp_count": rep.clamp_count}
            table.append(row)
            rows.append([row[c] for c in ("n", "method", "p_hat", "std_err", "log_rate", "target_rate", "gap")])
        if "crude" in ests:
            c, t = ests["crude"], ests["tilted"]
            se = math.hypot(c.std_err, t.std_err)
            z = abs(c.p_hat - t.p_hat) / se if se > 0 else (0.0 if c.p_hat == t.p_hat else math.inf)
            table.append({"n": int(n), "method": "agreement", "z": z, "agree": bool(z <= 3.0)})
    til = [r for r in table if r["method"] == "tilted" and r["p_hat"] > 0]
    slope = math.nan
    if len(til) >= 2:
        ns = np.array([r["n"] for r in til], float)
        lp = np.log([r["p_hat"] for r in til])
        slope = float(np.polyfit(ns, lp, 1)[0])
    gaps = [r["gap"] for r in table if r["method"] == "tilted"]
    summary = {"slope": slope, "slope_gap": abs(slope + tube_rate) if math.isfinite(slope) else math.inf,
               "tube_rate": tube_rate, "rate_of_target": I_phi,
               "gap_nonincreasing": bool(all(b <= a for a, b in zip(gaps, gaps[1:])))}
    _write_rows(out / "ldp_table.csv", ["n", "method", "p_hat", "std_err", "log_rate", "target_rate", "gap"], rows)
    dump_json({"command": "ldp-check", "table": table, "summary": summary}, out / "results.json")
    return ["results.json", "ldp_table.csv"]


def run_diagnose(cfg, out: FilePath, threads: int = 1) -> list[str]:
    model = _model(cfg)
    blk = cfg["diagnose"]
    phi = _target(cfg, model)
    deg = classify_nondegeneracy(model, phi, cfg["T"], blk.get("probe_delta", 0.1),
                                 blk.get("probe_gamma", 1e-3), blk.get("probes", 32))
    iv = check_condition_IV(model, phi, cfg["T"], blk.get("N_grid", [1, 2, 4, 8, 16, 32]))
    rows = tightness_diagnostics(model, blk.get("n_list", [4, 16]), blk.get("L", cfg["T"]),
                                 blk.get("c_grid", [1.0, 1.5, 2.0]), blk.get("delta_grid", [0.05, 0.1, 0.2]),
                                 blk.get("eta", 0.5), blk.get("M", 1000), cfg["dt"], int(cfg["seed"]),
                                 blk.get("starts", 10), threads)
    write_tightness_csv(rows, out / "tightness.csv")
    dump_json({
        "command": "diagnose",
        "degeneracy": {"f_plus": deg.f_plus.value, "f_minus": deg.f_minus.value, "b": deg.b.value,
                       "bound_kind": deg.bound_kind.value, "poisson_type": deg.poisson_type,
                       "delta": deg.delta, "gamma": deg.gamma, "probes": deg.probes},
        "condition_IV": iv.to_dict(),
        "tightness": [r.__dict__ for r in rows],
    }, out / "results.json")
    return ["results.json", "tightness.csv"]


RUNNERS = {"rate": run_rate, "fluid": run_fluid, "simulate": run_simulate, "estimate": run_estimate,
           "diagnose": run_diagnose, "ldp-check": run_ldp_check}


def _manifest(cfg, outputs) -> dict:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return {
        "command": cfg["command"],
        "config": cfg,
        "config_sha256": hashlib.sha256(canon.encode("utf-8")).hexdigest(),
        "seed": int(cfg["seed"]),
        "versions": {"jumpldp": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "outputs": sorted(outputs),
    }


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jumpldp", description="Large-deviation experiments for scaled jump-diffusions.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON experiment configuration")
        s.add_argument("--out", required=True, help="output directory (created if missing)")
        s.add_argument("--seed", type=int, default=None, help="master seed, overrides the config")
        s.add_argument("--threads", type=int, default=None, help="worker threads, overrides the config")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg_path = FilePath(args.config)
        try:
            raw = json.loads(cfg_path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if args.seed is not None:
            raw["seed"] = args.seed
        if args.threads is not None:
            raw["threads"] = args.threads
        cfg = validate_config(raw, args.command, cfg_path.resolve().parent)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    threads = int(cfg.pop("threads", 1))
    out = FilePath(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        outputs = RUNNERS[args.command](cfg, out, threads)
        dump_json(_manifest(cfg, outputs + ["manifest.json"]), out / "manifest.json")
    except (JumpLDPError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
