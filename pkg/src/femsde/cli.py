"""Command-line interface: generate | cluster | scan | closure | simulate.

Every command reads an optional JSON config (``--config``); the global
flags ``--seed``, ``--threads`` and ``--out`` override the config. Exit
codes: 0 success, 1 numeric failure, 2 usage or config error, 3 the
clustering hit its iteration limit.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
from pathlib import Path
import sys

import numpy as np

from . import io
from .closure import ClosureFit, fit_closure, reconstruct_theta_path, simulate_closed
from .gamma_solver import SpgConfig
from .hermite import NumericError
from .hyperselect import DiagnosticsError, gap_statistic, select_eps2, stationary_density
from .likelihood import ContractError, fitness_matrix, weighted_negloglik
from .models import DomainError, MODEL_REGISTRY, get_model
from .subspace import ClusteringResult, SubspaceConfig, run_subspace, scan_eps2
from .synth import SimulationError, default_example_config, generate_example
from .theta_solver import ThetaSolverConfig, minimize_theta

log = logging.getLogger("femsde")

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE, EXIT_NOT_CONVERGED = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


class NotConverged(RuntimeError):
    pass


# Defaults. Keys absent here are rejected when found in a config file.
DEFAULTS: dict = {
    "example": None,
    "n": None,
    "seed": 0,
    "threads": 1,
    "model": None,
    "data": None,
    "K": 2,
    "eps2": 20.0,
    "alpha": 1.0 / 3.0,
    "write_fitness": False,
    "subspace": {"tol": 1e-8, "max_iter": 100, "n_restarts": 3},
    "theta_solver": {"global_evals": 300, "local_evals": 300, "population": 3000, "rel_tol": 1e-10},
    "spg": {"tol": 1e-8, "max_iter": 10000, "step_min": 1e-10, "step_max": 1e10, "memory": 10, "armijo": 1e-4},
    "scan": {
        "energy": True,
        "gap": False,
        "eps2_grid": {"min": 0.1, "max": 100.0, "num": 101},
        "round_trip": False,
        "level": 0,
        "k_values": [2, 3, 4, 5, 6, 7, 8, 9, 10],
        "B": 10,
    },
    "closure": {
        "result": None,
        "degrees": 1,
        "aux_index_per_param": None,
        "substeps": 100,
        "x0": None,
        "min_share": 1e-3,
        "histograms": True,
        "bins": 60,
    },
    "simulate": {"closure": None, "aux": None, "substeps": 100, "x0": None},
}

# values from the published experiment settings, applied before the config file
EXAMPLE_PRESETS: dict = {
    "ou": {"model": "ou", "K": 6, "eps2": 20.0, "alpha": 1.0 / 3.0},
    "logdrift_2aux": {
        "model": "logdrift",
        "K": 10,
        "eps2": 30.0,
        "theta_solver": {"global_evals": 300, "local_evals": 300, "population": 3000},
        "closure": {"aux_index_per_param": [0, 1]},
    },
    "doublewell": {
        "model": "doublewell",
        "K": 5,
        "eps2": 20.0,
        "alpha": 0.1,
        "theta_solver": {"global_evals": 500, "local_evals": 500, "population": 1000},
    },
}

_TYPES = {
    "example": (str, type(None)),
    "n": (int, type(None)),
    "seed": int,
    "threads": int,
    "model": (str, type(None)),
    "data": (str, type(None)),
    "K": int,
    "eps2": (int, float),
    "alpha": (int, float),
    "write_fitness": bool,
}


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where + key!r} must be an object")
            out[key] = _merge(base[key], val, where + key + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def _validate(cfg: dict) -> None:
    for key, types in _TYPES.items():
        val = cfg[key]
        if isinstance(val, bool) and types is not bool:
            raise ConfigError(f"config key {key!r} has the wrong type (bool)")
        if not isinstance(val, types):
            raise ConfigError(f"config key {key!r} has the wrong type ({type(val).__name__})")
    if cfg["example"] is not None and cfg["example"] not in EXAMPLE_PRESETS:
        raise ConfigError(f"unknown example {cfg['example']!r}; choose from {sorted(EXAMPLE_PRESETS)}")
    if cfg["model"] is not None and cfg["model"] not in MODEL_REGISTRY:
        raise ConfigError(f"unknown model {cfg['model']!r}; choose from {sorted(MODEL_REGISTRY)}")
    if cfg["K"] < 1:
        raise ConfigError("K must be at least 1")
    if cfg["eps2"] < 0:
        raise ConfigError("eps2 must be non-negative")
    if not 0 < cfg["alpha"] <= 1:
        raise ConfigError("alpha must lie in (0, 1]")
    if cfg["threads"] < 1:
        raise ConfigError("threads must be positive")
    try:
        _subspace_cfg(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, example: str | None = None, overrides: dict | None = None) -> dict:
    """Defaults, then the example preset, then the file, then CLI flags."""
    user: dict = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
    ex = example or user.get("example")
    cfg = copy.deepcopy(DEFAULTS)
    if ex is not None:
        if ex not in EXAMPLE_PRESETS:
            raise ConfigError(f"unknown example {ex!r}; choose from {sorted(EXAMPLE_PRESETS)}")
        cfg = _merge(cfg, EXAMPLE_PRESETS[ex])
        cfg["example"] = ex
    cfg = _merge(cfg, user)
    if example is not None:
        cfg["example"] = example
    cfg = _merge(cfg, {k: v for k, v in (overrides or {}).items() if v is not None})
    _validate(cfg)
    return cfg


def _subspace_cfg(cfg: dict) -> SubspaceConfig:
    return SubspaceConfig(
        alpha=float(cfg["alpha"]),
        seed=int(cfg["seed"]),
        threads=int(cfg["threads"]),
        theta_solver=ThetaSolverConfig(seed=int(cfg["seed"]), **cfg["theta_solver"]),
        spg=SpgConfig(**cfg["spg"]),
        **cfg["subspace"],
    )


def _model_name(cfg: dict, meta: dict | None) -> str:
    name = cfg["model"] or (meta or {}).get("model")
    if name is None:
        raise ConfigError("no model given (config key 'model' or dataset sidecar)")
    return name


def _load_data(cfg: dict):
    if cfg["data"] is None:
        raise ConfigError("no dataset given (config key 'data')")
    try:
        return io.read_dataset(cfg["data"])
    except FileNotFoundError as exc:
        raise ConfigError(f"dataset {cfg['data']} not found") from exc


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: dict, out: Path) -> int:
    if cfg["example"] is None:
        raise ConfigError("generate needs --example or config key 'example'")
    ecfg = default_example_config(cfg["example"], seed=cfg["seed"], n=cfg["n"])
    ds = generate_example(ecfg)
    sidecar = {
        "model": ds.model_id,
        "example": ds.example,
        "n": ds.x.n,
        "dt": ds.x.dt,
        "seed": cfg["seed"],
        "config": ds.metadata["config"],
        "theta_true": np.asarray(ds.theta_true).tolist(),
    }
    path = io.write_dataset(out / f"{ds.example}.csv", ds.x, ds.aux, sidecar)
    print(f"wrote {path}: N={ds.x.n} dt={ds.x.dt} model={ds.model_id} seed={cfg['seed']} aux={len(ds.aux)}")
    return EXIT_OK


def _write_result(out: Path, res: ClusteringResult, extra: dict | None = None, stem: str = "result") -> None:
    payload = res.to_dict(include_gamma=False)
    payload.update(extra or {})
    io.write_json(out / f"{stem}.json", payload)
    io.write_gamma(out / f"{stem}_gamma.csv", res.times, res.gamma_fine)
    dtau = res.dt * (res.gamma_fine.shape[1] - 1) / (res.n_coarse - 1)
    io.write_gamma(out / f"{stem}_gamma_coarse.csv", dtau * np.arange(res.n_coarse), res.gamma_coarse)
    path = reconstruct_theta_path(res)
    names = list(get_model(res.model).param_names)
    io.write_columns(out / f"{stem}_theta_path.csv", ["t"] + names, [res.times] + list(path))


def cmd_cluster(cfg: dict, out: Path) -> int:
    x, _, meta = _load_data(cfg)
    model = get_model(_model_name(cfg, meta))
    scfg = _subspace_cfg(cfg)
    res = run_subspace(model, x, cfg["K"], float(cfg["eps2"]), scfg)
    extra = {"config": cfg}
    fm = fitness_matrix(model, x, res.theta)
    extra["negloglik"] = weighted_negloglik(fm, res.gamma_fine)
    if res.K == 1:
        # cross-check against a direct single-model fit
        th, val = minimize_theta(model, x, np.ones(x.n), scfg.theta_solver)
        extra["mle_theta"] = th.tolist()
        extra["mle_negloglik"] = val
    if cfg["write_fitness"]:
        fm.to_csv(out / "fitness.csv")
    _write_result(out, res, extra)
    with open(out / "result_state.json", "w") as fh:
        fh.write(res.to_json(include_gamma=True))
    print(f"K={res.K} eps2={res.eps2} iterations={res.iterations} converged={res.converged} functional={res.functional:.10g}")
    for k, th in enumerate(res.theta):
        print(f"  cluster {k + 1}: theta = {np.array2string(th, precision=5)}")
    if not res.converged:
        raise NotConverged(f"no convergence within {scfg.max_iter} iterations")
    return EXIT_OK


def _eps2_grid(spec) -> list[float]:
    if isinstance(spec, dict):
        if set(spec) - {"min", "max", "num"}:
            raise ConfigError("scan.eps2_grid accepts min, max and num")
        num = int(spec.get("num", 0))
        if num < 1:
            raise ConfigError("scan.eps2_grid is empty")
        lo, hi = float(spec["min"]), float(spec["max"])
        if not 0 < lo <= hi:
            raise ConfigError("scan.eps2_grid needs 0 < min <= max")
        return list(np.geomspace(lo, hi, num)) if num > 1 else [lo]
    grid = [float(v) for v in spec]
    if not grid:
        raise ConfigError("scan.eps2_grid is empty")
    return sorted(grid)


def cmd_scan(cfg: dict, out: Path) -> int:
    sc = cfg["scan"]
    if not (sc["energy"] or sc["gap"]):
        raise ConfigError("scan needs scan.energy or scan.gap")
    grid = _eps2_grid(sc["eps2_grid"]) if sc["energy"] else []
    k_values = [int(k) for k in sc["k_values"]] if sc["gap"] else []
    if sc["gap"] and (not k_values or min(k_values) < 2):
        raise ConfigError("scan.k_values must be a non-empty list of K >= 2")
    x, _, meta = _load_data(cfg)
    model = get_model(_model_name(cfg, meta))
    scfg = _subspace_cfg(cfg)
    eps2 = float(cfg["eps2"])
    if sc["energy"]:
        results = scan_eps2(model, x, cfg["K"], grid, scfg, round_trip=bool(sc["round_trip"]))
        curve = select_eps2(results)
        curve.to_csv(out / "energy.csv")
        level = min(int(sc["level"]), curve.energy.shape[0] - 1)
        eps2 = curve.recommended(level)
        best = results[int(np.argmax(curve.energy[level]))]
        _write_result(out, best, {"config": cfg}, stem="scan_best")
        print(f"recommended eps2 = {eps2:.6g} (filter level {level})")
    if sc["gap"]:
        rep = gap_statistic(model, x, k_values, eps2, int(sc["B"]), scfg, seed=cfg["seed"], threads=cfg["threads"])
        rep.to_csv(out / "gap.csv")
        print(f"recommended K = {rep.recommended_k}")
    return EXIT_OK


def _histograms(out: Path, model, fit: ClosureFit, res: ClusteringResult, x, pred, bins: int) -> None:
    lo = min(x.values.min(), pred.values.min())
    hi = max(x.values.max(), pred.values.max())
    edges = np.linspace(lo, hi, bins + 1)
    mids = 0.5 * (edges[1:] + edges[:-1])
    cols, header = [mids], ["x"]
    h, _ = np.histogram(pred.values, bins=edges, density=True)
    cols.append(h)
    header.append("closed_all")
    h, _ = np.histogram(x.values, bins=edges, density=True)
    cols.append(h)
    header.append("train_all")
    for k in range(res.K):
        w = res.gamma_fine[k]
        if w.sum() <= 0:
            continue
        h, _ = np.histogram(x.values, bins=edges, weights=w, density=True)
        cols.append(h)
        header.append(f"train_{k + 1}")
        cols.append(stationary_density(model, res.theta[k], mids))
        header.append(f"stationary_{k + 1}")
    io.write_columns(out / "histograms.csv", header, cols)


def cmd_closure(cfg: dict, out: Path) -> int:
    cc = cfg["closure"]
    if cc["result"] is None:
        raise ConfigError("closure needs closure.result (clustering result_state.json)")
    x, aux, meta = _load_data(cfg)
    if not aux:
        raise ConfigError("dataset has no auxiliary series")
    res = ClusteringResult.from_json(cc["result"])
    model = get_model(res.model)
    fit = fit_closure(res, aux, cc["degrees"], cc["aux_index_per_param"], min_share=cc["min_share"])
    fit.to_json(out / "closure.json")
    x0 = float(x.values[0]) if cc["x0"] is None else float(cc["x0"])
    pred = simulate_closed(model, fit, aux, x0, int(cc["substeps"]), seed=cfg["seed"])
    io.write_series(out / "prediction.csv", pred)
    if cc["histograms"]:
        _histograms(out, model, fit, res, x, pred, int(cc["bins"]))
    names = get_model(res.model).param_names
    for m, coef in enumerate(fit.coefficients):
        print(f"{names[m]}: S(u) coefficients (lowest order first) {np.array2string(np.asarray(coef), precision=5)}")
    return EXIT_OK


def cmd_simulate(cfg: dict, out: Path) -> int:
    sm = cfg["simulate"]
    if sm["closure"] is None or sm["aux"] is None:
        raise ConfigError("simulate needs simulate.closure and simulate.aux")
    fit = ClosureFit.from_json(sm["closure"])
    try:
        x, aux, _ = io.read_dataset(sm["aux"])
    except FileNotFoundError as exc:
        raise ConfigError(f"dataset {sm['aux']} not found") from exc
    if not aux:
        raise ConfigError("auxiliary dataset has no u column")
    x0 = float(x.values[0]) if sm["x0"] is None else float(sm["x0"])
    pred = simulate_closed(fit.model, fit, aux, x0, int(sm["substeps"]), seed=cfg["seed"])
    io.write_series(out / "simulated.csv", pred)
    print(f"wrote {out / 'simulated.csv'}: N={pred.n} dt={pred.dt}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "cluster": cmd_cluster,
    "scan": cmd_scan,
    "closure": cmd_closure,
    "simulate": cmd_simulate,
}


def _common_flags(suppress: bool) -> argparse.ArgumentParser:
    # the subcommand copies must not reset flags given before the subcommand
    kw = {"argument_default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False, **kw)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--threads", type=int, help="worker threads (overrides config)")
    common.add_argument("--out", "-o", metavar="DIR", help="output directory (default: current)")
    common.add_argument("--example", choices=sorted(EXAMPLE_PRESETS), help="load the preset for a synthetic example")
    common.add_argument("--data", metavar="CSV", help="input dataset (overrides config)")
    common.add_argument("-v", "--verbose", action="count")
    return common


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="femsde", description=__doc__.splitlines()[0], parents=[_common_flags(False)])
    p.set_defaults(out=".", verbose=0)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[_common_flags(True)])
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(
            args.config,
            example=args.example,
            overrides={"seed": args.seed, "threads": args.threads, "data": args.data},
        )
        out = _out(args)
        return COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NotConverged as exc:
        print(f"warning: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except (NumericError, DomainError, SimulationError, DiagnosticsError, ContractError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
