"""Command-line pipeline: gen-data, train, distill, direct-sr, assemble, simulate, analyze.

Every subcommand reads one JSON config (``--config``) whose sections mirror the
library knobs; ``--section.key=value`` overrides single entries (values are
parsed as JSON when possible). Relative file names resolve inside
``output_dir`` and each stage reads the previous stage's default output.

Exit codes: 0 ok, 2 config error, 3 training divergence, 4 empty Pareto
front, 5 return-mapping failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from collections import Counter
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import analysis as A
from . import data as D
from . import expr as E
from . import gpsr as G
from . import plasticity as PL
from . import qnm as Q

EXIT_CONFIG, EXIT_TRAIN, EXIT_SR, EXIT_SIM = 2, 3, 4, 5

DEFAULTS: dict = {
    "seed": 0,
    "output_dir": "yieldforge-out",
    "data": {
        "generator": "flower",
        "params": {},
        "expr": None,
        "names": ["p", "rho", "theta"],
        "grids": None,
        "rho_bracket": [0.0, 1.0e4],
        "n_phi": 11,
        "band": [0.85, 1.15],
        "refine": 10,
        "lode": False,
        "noise": 0.0,
        "n": 500,
        "noise_std": 0.1,
        "output": "data.csv",
    },
    "train": {
        "dataset": None,
        "mode": "NAM",
        "epochs": 4000,
        "lr": 0.005,
        "alpha_lo": 0.0,
        "alpha_ho": 0.0,
        "batch_size": None,
        "M": 20,
        "sigma_v": 1.0,
        "hidden_sizes": [40, 20, 20],
        "scale_target": True,
        "output": "model.json",
        "trace": "trace.csv",
        "report": "features.json",
    },
    "sr": {
        "model": None,
        "dataset": None,
        "samples_per_fn": 256,
        "population_size": 1000,
        "generations": 60,
        "tournament_size": 5,
        "crossover_prob": 0.7,
        "mutation_prob": 0.25,
        "max_depth": 6,
        "operator_set": list(G.BINARY_DEFAULT + G.UNARY_DEFAULT),
        "constant_range": [-20.0, 20.0],
        "const_opt_steps": 20,
        "const_opt_lr": 0.05,
        "const_opt_fraction": 0.1,
        "polish_steps": 300,
        "parsimony_pressure": 1e-3,
        "elitism": 5,
        "init_depth": [2, 4],
        "islands": 1,
        "max_complexity": None,
        "n_jobs": 1,
        "test_fraction": 0.2,
        "budget_factor": None,
        "fronts": "fronts.json",
        "selection": "selection.json",
        "symbolic": "symbolic.json",
        "direct_front": "direct_front.json",
        "direct_report": "direct_report.json",
    },
    "simulate": {
        "model": None,
        "E": 200000.0,
        "nu": 0.3,
        "increment": [-1.0e-4, 0.0, 0.0],
        "steps": 100,
        "increments": None,
        "extras": {},
        "tol": 1e-10,
        "max_iter": 50,
        "output": "history.csv",
    },
    "analyze": {
        "model": None,
        "extras": {},
        "k_p": 3,
        "p": 0.0,
        "rho": 200.0,
        "n_theta": 20000,
        "theta_hat": None,
        "polar_coefficients": None,
        "convexity_p": [0.0],
        "convexity_n_theta": 360,
        "rho_bracket": [1e-6, 1.0e4],
        "benchmark": "flower",
        "benchmark_params": {},
        "benchmark_grid": {"n_theta": 200, "n_p": 50, "p_range": [-2000.0, 2000.0]},
        "output": "analysis.json",
        "symmetry_csv": "symmetry.csv",
    },
}

FREEFORM = ("params", "extras", "benchmark_params", "grids", "max_complexity")
GENERATORS = ("flower", "matsuoka-nakai", "user-expr", "toy4d", "pyramid", "nguyen12")


class ConfigError(ValueError):
    pass


class StageFailure(RuntimeError):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# config handling


def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k!r}")
        # free-form mappings take the user's value as is
        if isinstance(base[k], dict) and isinstance(v, dict) and k not in FREEFORM:
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if not item.startswith("--") or "=" not in item:
            raise ConfigError(f"overrides must look like --key=value, got {item!r}")
        key, text = item[2:].split("=", 1)
        parts = key.replace("-", "_").split(".")
        node, base = cfg, DEFAULTS
        for p in parts[:-1]:
            if base is not None and (p not in base or not isinstance(base[p], dict)):
                raise ConfigError(f"unknown config key {key!r}")
            node = node.setdefault(p, {})
            # below a free-form mapping any key goes
            base = None if base is None or p in FREEFORM else base[p]
        if base is not None and parts[-1] not in base:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(text)
    return cfg


def load_config(path: str | None, overrides: list[str]) -> dict:
    user = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
    return apply_overrides(_merge(DEFAULTS, user), overrides)


def _out(cfg: dict, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else Path(cfg["output_dir"]) / p


def _input(cfg: dict, given, default_name: str) -> Path:
    path = _out(cfg, given if given is not None else default_name)
    if not path.exists():
        raise ConfigError(f"input file {path} does not exist")
    return path


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, default=D._jsonable) + "\n")


def gp_config(sr: dict, seed: int) -> G.GpConfig:
    names = {f.name for f in fields(G.GpConfig)}
    kw = {k: v for k, v in sr.items() if k in names}
    try:
        return G.GpConfig(**kw, rng_seed=seed)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"sr: {e}") from None


# ---------------------------------------------------------------------------
# stages


def cmd_gen_data(cfg: dict) -> D.Dataset:
    c = cfg["data"]
    gen, seed = c["generator"], cfg["seed"]
    if gen not in GENERATORS:
        raise ConfigError(f"unknown generator {gen!r}; choose from {', '.join(GENERATORS)}")
    try:
        if gen in ("toy4d", "pyramid", "nguyen12"):
            if gen == "toy4d":
                ds = D.toy_4d_dataset(c["n"], seed, c["noise_std"])
            elif gen == "pyramid":
                ds = D.pyramid_dataset(c["n"], seed)
            else:
                ds = D.nguyen12_dataset(c["n"], seed)
        else:
            if gen == "flower":
                surf = D.flower_surface(**c["params"])
            elif gen == "matsuoka-nakai":
                surf = D.matsuoka_nakai_surface(**c["params"])
            else:
                if c["expr"] is None and c["grids"] is None:
                    # the built-in porous-metal demo
                    surf = D.porous_surface(**c["params"])
                elif not c["expr"] or not c["grids"]:
                    raise ConfigError("user-expr needs both data.expr and data.grids")
                else:
                    grids = {k: _grid(v) for k, v in c["grids"].items()}
                    surf = D.user_surface(c["expr"], c["names"], grids, tuple(c["rho_bracket"]))
            ds = D.augment_levelset(surf, c["n_phi"], tuple(c["band"]), c["refine"], c["lode"])
            if c["noise"]:
                ds = D.add_radial_noise(ds, c["noise"], seed)
    except (TypeError, D.InvalidParams, D.InvalidBand, D.RootNotBracketed, E.ParseError) as e:
        raise ConfigError(f"data: {e}") from None
    out = _out(cfg, c["output"])
    ds.write_csv(out)
    print(f"{gen}: {len(ds)} rows, features {ds.feature_names} -> {out}")
    return ds


def _grid(g):
    """A grid is a list of values or {"linspace": [lo, hi, n]} / {"theta": n}."""
    if isinstance(g, dict):
        if "linspace" in g:
            lo, hi, n = g["linspace"]
            return np.linspace(lo, hi, int(n))
        if "theta" in g:
            return D.theta_grid(int(g["theta"]))
        raise ConfigError(f"bad grid {g}")
    return np.asarray(g, dtype=float)


def cmd_train(cfg: dict) -> Q.QnmModel:
    c = cfg["train"]
    ds = D.Dataset.read_csv(_input(cfg, c["dataset"], cfg["data"]["output"]))
    try:
        tc = Q.TrainConfig(c["epochs"], c["lr"], Q.SparsityConfig(c["alpha_lo"], c["alpha_ho"]), cfg["seed"], c["batch_size"])
        model, trace = Q.fit_dataset(
            ds.X,
            ds.phi,
            c["mode"],
            tc,
            feature_names=ds.feature_names,
            scale_target=c["scale_target"],
            M=c["M"],
            sigma_v=c["sigma_v"],
            hidden_sizes=tuple(c["hidden_sizes"]),
        )
    except Q.DivergenceDetected as e:
        raise StageFailure(EXIT_TRAIN, str(e)) from None
    except (ValueError, TypeError) as e:
        raise ConfigError(f"train: {e}") from None
    model.save(_out(cfg, c["output"]))
    trace.write_csv(_out(cfg, c["trace"]), model)
    rep = Q.feature_report(model)
    _dump({"terms": rep.to_dict()["terms"], "final_mse": trace.mse[-1] if trace.mse else None}, _out(cfg, c["report"]))
    for t in rep.terms:
        print(f"{t.term:>24s} {t.coefficient:+.6g}")
    return model


def _max_complexity(sr: dict, name: str):
    mc = sr["max_complexity"]
    if isinstance(mc, dict):
        return mc.get(name)
    return mc


def select(fronts: list[G.ParetoFront], names: list[str], sr: dict) -> list[dict]:
    sel = []
    for name, front in zip(names, fronts):
        mc = _max_complexity(sr, name)
        entry = front.best() if mc is None else front.at_most(int(mc))
        if entry is None:
            raise StageFailure(EXIT_SR, f"no front entry for {name} within complexity {mc}")
        sel.append({"feature": name, "complexity": entry.complexity, "loss": entry.loss, "expr": front.expr_string(entry)})
    return sel


def cmd_distill(cfg: dict) -> list[G.ParetoFront]:
    sr = cfg["sr"]
    model = Q.QnmModel.load(_input(cfg, sr["model"], cfg["train"]["output"]))
    fronts = G.distill(model, sr["samples_per_fn"], gp_config(sr, cfg["seed"]), sr["n_jobs"])
    empty = [n for n, f in zip(model.feature_names, fronts) if len(f) == 0]
    if empty:
        raise StageFailure(EXIT_SR, f"empty Pareto front for {empty}")
    _dump({n: f.to_records() for n, f in zip(model.feature_names, fronts)}, _out(cfg, sr["fronts"]))
    sel = select(fronts, model.feature_names, sr)
    _dump({"selection": sel}, _out(cfg, sr["selection"]))
    for s in sel:
        print(f"{s['feature']}: complexity {s['complexity']}, loss {s['loss']:.3e}, {s['expr']}")
    return fronts


def cmd_assemble(cfg: dict) -> E.Expr:
    sr = cfg["sr"]
    model_path = _input(cfg, sr["model"], cfg["train"]["output"])
    model = Q.QnmModel.load(model_path)
    sel_path = _input(cfg, None, sr["selection"])
    records = {r["feature"]: r for r in json.loads(sel_path.read_text())["selection"]}
    chosen = []
    for name in model.feature_names:
        r = records.get(name)
        chosen.append(None if r is None else E.parse(r["expr"], [f"{name}_bar"]))
    try:
        ex = G.assemble(model, chosen)
    except G.MissingSelection as e:
        raise ConfigError(str(e)) from None
    text = E.to_string(E.rename(ex, model.feature_names))
    doc = {
        "kind": "symbolic",
        "expr": text,
        "names": model.feature_names,
        "provenance": {"model": model_path.name, "selection": [records[n] for n in model.feature_names]},
    }
    _dump(doc, _out(cfg, sr["symbolic"]))
    print(text)
    return ex


def load_handle(path: Path, extras: dict | None = None) -> PL.YieldModelHandle:
    d = json.loads(Path(path).read_text())
    try:
        if "shape_fns" in d:
            return PL.YieldModelHandle.neural(Q.QnmModel.from_dict(d), extras)
        if d.get("kind") == "symbolic":
            return PL.YieldModelHandle.symbolic(d["expr"], d["names"], extras)
    except (ValueError, E.ParseError) as e:
        raise ConfigError(f"cannot load model {path}: {e}") from None
    raise ConfigError(f"{path} is neither a neural nor a symbolic model file")


def _default_model(cfg: dict) -> str:
    sym = _out(cfg, cfg["sr"]["symbolic"])
    return cfg["sr"]["symbolic"] if sym.exists() else cfg["train"]["output"]


def cmd_simulate(cfg: dict) -> list[PL.PathStep]:
    c = cfg["simulate"]
    handle = load_handle(_input(cfg, c["model"], _default_model(cfg)), c["extras"])
    try:
        params = PL.ElasticParams.from_E_nu(c["E"], c["nu"])
    except ValueError as e:
        raise ConfigError(f"simulate: {e}") from None
    incs = c["increments"] if c["increments"] is not None else [c["increment"]] * int(c["steps"])
    try:
        hist = PL.drive_path(handle, params, [np.asarray(d, dtype=float) for d in incs], c["tol"], c["max_iter"])
    except PL.NoConvergence as e:
        raise StageFailure(EXIT_SIM, str(e)) from None
    out = _out(cfg, c["output"])
    PL.write_history_csv(hist, out)
    print(f"{len(hist)} steps -> {out}; final stress {hist[-1].sigma if hist else None}")
    return hist


def cmd_analyze(cfg: dict) -> dict:
    c = cfg["analyze"]
    handle = load_handle(_input(cfg, c["model"], _default_model(cfg)), c["extras"])
    report: dict = {"model_kind": handle.kind}

    coeffs = c["polar_coefficients"]
    if coeffs is None and handle.kind == "symbolic":
        coeffs = A.polar_coefficients(handle)
    if coeffs is not None:
        report["polar_convexity"] = A.polar_convexity(*coeffs).to_dict()

    th = D.theta_grid(int(c["convexity_n_theta"]))
    S = A.surface_samples(handle, c["convexity_p"], th, c["rho_bracket"])
    report["hessian_convexity"] = A.hessian_convexity(handle, S).to_dict()

    th_hat = c["theta_hat"]
    if th_hat is None and coeffs is not None:
        th_hat = coeffs[1:3]
    sym = A.symmetry_error(handle, int(c["k_p"]), int(c["n_theta"]), th_hat, p=c["p"], rho=c["rho"])
    report["symmetry"] = sym.to_dict()
    sym.write_csv(_out(cfg, c["symmetry_csv"]))

    bench = c["benchmark"]
    if bench:
        g = c["benchmark_grid"]
        kw = dict(c["benchmark_params"], n_theta=g["n_theta"], n_p=g["n_p"], p_range=tuple(g["p_range"]))
        try:
            surf = D.flower_surface(**kw) if bench == "flower" else D.matsuoka_nakai_surface(**kw)
        except (TypeError, D.InvalidParams) as e:
            raise ConfigError(f"analyze: {e}") from None
        report["surface_rms"] = {"benchmark": bench, **A.surface_rms(handle, surf).to_dict()}
    _dump(report, _out(cfg, c["output"]))
    print(json.dumps({k: v for k, v in report.items() if k != "hessian_convexity"}, indent=1, default=D._jsonable))
    return report


def cmd_direct_sr(cfg: dict) -> dict:
    """Multivariate GP on the raw dataset, the baseline for the two-step route."""
    sr = cfg["sr"]
    ds = D.Dataset.read_csv(_input(cfg, sr["dataset"], cfg["data"]["output"]))
    rng = np.random.default_rng(cfg["seed"])
    n = len(ds)
    order = rng.permutation(n)
    n_test = int(round(sr["test_fraction"] * n))
    test, train_idx = order[:n_test], order[n_test:]
    gc = gp_config(sr, cfg["seed"])
    # the two-step route spends one univariate run per feature
    factor = sr["budget_factor"] if sr["budget_factor"] is not None else ds.X.shape[1]
    gc.generations = int(gc.generations * factor)
    front = G.evolve(ds.X[train_idx], ds.phi[train_idx], gc, names=ds.feature_names)
    if len(front) == 0:
        raise StageFailure(EXIT_SR, "empty Pareto front")
    entries = []
    for e in front:
        pred = E.evaluate_array(e.expr, [ds.X[test, i] for i in range(ds.X.shape[1])]) if n_test else np.array([])
        rmse = float(np.sqrt(np.mean((pred - ds.phi[test]) ** 2))) if n_test else None
        used = Counter(ds.feature_names[v] for v in _var_occurrences(e.expr))
        entries.append({"complexity": e.complexity, "loss": e.loss, "test_rmse": rmse, "expr": front.expr_string(e), "occurrences": dict(used)})
    best = front.best()
    occ_best = Counter(ds.feature_names[v] for v in _var_occurrences(best.expr))
    report = {
        "n_train": int(train_idx.size),
        "n_test": int(n_test),
        "generations": gc.generations,
        "best": front.expr_string(best),
        "occurrences_best": {name: occ_best.get(name, 0) for name in ds.feature_names},
        "entries_using": {name: sum(1 for r in entries if name in r["occurrences"]) for name in ds.feature_names},
        "front": entries,
    }
    _dump(front.to_records(), _out(cfg, sr["direct_front"]))
    _dump(report, _out(cfg, sr["direct_report"]))
    print(f"best: {report['best']}")
    print("variable occurrences:", report["occurrences_best"])
    return report


def _var_occurrences(node: E.Expr):
    if isinstance(node, E.Var):
        yield node.index
    for ch in E.children(node):
        yield from _var_occurrences(ch)


def cmd_pipeline(cfg: dict) -> None:
    for stage in (cmd_gen_data, cmd_train, cmd_distill, cmd_assemble, cmd_simulate, cmd_analyze):
        stage(cfg)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "distill": cmd_distill,
    "direct-sr": cmd_direct_sr,
    "assemble": cmd_assemble,
    "simulate": cmd_simulate,
    "analyze": cmd_analyze,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="yieldforge", description="Interpretable yield-function discovery pipeline.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="JSON config file; missing keys take defaults")
    ap.add_argument("--max-complexity", type=int, help="distill: select the best entry at or below this complexity")
    ap.add_argument("--print-defaults", action="store_true", help="print the default config and exit")
    return ap


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    if "--print-defaults" in argv:
        print(json.dumps(DEFAULTS, indent=1))
        return 0
    ap = build_parser()
    try:
        args, rest = ap.parse_known_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else 0
    try:
        cfg = load_config(args.config, rest)
        if args.max_complexity is not None:
            cfg["sr"]["max_complexity"] = args.max_complexity
        Path(cfg["output_dir"]).mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
