"""Command-line interface: simulate, fit, loglik, map, study, compare.

Exit codes: 0 success, 2 data error, 3 numerical failure, 64 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import TrajectorySet, format_trajectories, read_trajectories
from .errors import DataError, NumericalError
from .estimate import SCHEMA_VERSION, OptimizerConfig, fit_result_config
from .exact import EmConfig, loglik_estimate
from .potential import ModelParams
from .simbench import (
    GridSpec,
    Scenario,
    StudyConfig,
    default_grid,
    default_theta,
    fit_method,
    grid_csv,
    map_metrics,
    median_error_grids,
    normalize_method,
    potential_grid,
    replication_seed,
    run_study,
    simulate,
)
from .transition import METHODS, pseudo_loglik

log = logging.getLogger("driftscape")

EXIT_OK, EXIT_DATA, EXIT_NUMERIC, EXIT_USAGE = 0, 2, 3, 64
CRITERIA = ("euler", "ozaki", "kessler", "ea")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- configuration documents -------------------------------------------------------------


def _checked(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise UsageError(f"config section {where!r} must be an object")
    known = {f.name for f in fields(cls)}
    extra = sorted(set(d) - known)
    if extra:
        raise UsageError(f"unknown key(s) in {where!r}: {', '.join(extra)}")
    return d


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs, loadable from a JSON document.

    Top-level keys: ``scenario``, ``optimizer``, ``em``, ``grid``, ``methods``,
    ``seed``, ``em_replications``. Unknown keys anywhere are rejected.
    """

    scenario: Scenario = field(default_factory=lambda: Scenario(default_theta()))
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    em: EmConfig = field(default_factory=EmConfig)
    grid: GridSpec | None = None
    methods: tuple = ("euler", "ozaki", "kessler", "adaptive_kessler")
    seed: int = 0
    em_replications: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _checked(cls, d, "root")
        kw = {}
        if "scenario" in d:
            sc = dict(_checked(Scenario, d["scenario"], "scenario"))
            kw["scenario"] = Scenario.from_dict(sc)
        if "optimizer" in d:
            opt = dict(_checked(OptimizerConfig, d["optimizer"], "optimizer"))
            if opt.get("init_box") is not None:
                opt["init_box"] = tuple(tuple(b) for b in opt["init_box"])
            kw["optimizer"] = OptimizerConfig(**opt)
        if "em" in d:
            kw["em"] = EmConfig(**_checked(EmConfig, d["em"], "em"))
        if d.get("grid") is not None:
            kw["grid"] = GridSpec(**_checked(GridSpec, d["grid"], "grid"))
        if "methods" in d:
            kw["methods"] = tuple(normalize_method(m) for m in d["methods"])
        for key in ("seed", "em_replications"):
            if key in d:
                kw[key] = d[key]
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path}: {exc}") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "optimizer": fit_result_config(self.optimizer),
            "em": asdict(self.em),
            "grid": None if self.grid is None else self.grid.to_dict(),
            "methods": list(self.methods),
            "seed": self.seed,
            "em_replications": self.em_replications,
        }


def _dump(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _write(path, text: str):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")


def load_params(path) -> ModelParams:
    """Read a parameter from a fit result or a bare ``{gamma, components}`` document."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if "theta_hat" in doc:
        doc = doc["theta_hat"]
    elif "theta_true" in doc:
        doc = doc["theta_true"]
    try:
        return ModelParams.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: not a parameter document ({exc})") from None


def _base_config(args) -> RunConfig:
    return RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()


# -- commands ------------------------------------------------------------------------------


def anonymize(data: TrajectorySet) -> TrajectorySet:
    """Recenter on the mean position and rescale to unit overall spread."""
    pts = data.all_positions()
    center = pts.mean(axis=0)
    spread = float(np.sqrt(np.mean(np.sum((pts - center) ** 2, axis=1) / 2.0)))
    return data.scaled(1.0 / spread if spread > 0 else 1.0, center)


def cmd_simulate(args) -> int:
    cfg = _base_config(args)
    sc = cfg.scenario
    over = {k: v for k, v in (("dt", args.dt), ("g", args.g), ("n", args.n), ("seed", args.seed)) if v is not None}
    sc = replace(sc, **over)
    rng = np.random.default_rng(replication_seed(sc.seed, args.replication))
    data = simulate(sc, rng, args.mode)
    if args.anonymize:
        data = anonymize(data)
    _write(args.out, format_trajectories(data))
    return EXIT_OK


def _opt_config(args, cfg: RunConfig) -> OptimizerConfig:
    opt = cfg.optimizer
    over = {}
    if args.restarts is not None:
        over["restarts"] = args.restarts
    if args.max_evals is not None:
        over["max_evals"] = args.max_evals
    # seed precedence: flag, then the config's root seed
    over["seed"] = args.seed if args.seed is not None else cfg.seed
    return replace(opt, **over)


def _em_config(args, cfg: RunConfig, seed) -> EmConfig:
    em = cfg.em
    over = {"seed": seed}
    for name in ("n_bridges", "max_iters", "mstep_evals"):
        v = getattr(args, name, None)
        if v is not None:
            over[name] = v
    return replace(em, **over)


def cmd_fit(args) -> int:
    cfg = _base_config(args)
    data = read_trajectories(args.data)
    method = normalize_method(args.method)
    opt = _opt_config(args, cfg)
    em = _em_config(args, cfg, opt.seed)
    res = fit_method(method, data, args.k, opt, em)
    doc = res.to_dict()
    doc["config"] = {"method": method, "k": args.k, "data": str(args.data), "optimizer": fit_result_config(opt), "em": asdict(em)}
    doc["version"] = __version__
    _write(args.out, _dump(doc))
    print(f"{method}: objective {res.objective:.6f}, skipped fraction {res.skipped_fraction:.4f}")
    return EXIT_OK


def evaluate_criteria(theta: ModelParams, data: TrajectorySet, n_mc: int, seed: int) -> dict:
    """Every criterion at ``theta``, divided by the number of segments."""
    ns = data.n_segments
    out = {}
    for m in METHODS:
        out[m] = pseudo_loglik(m, theta, data).value / ns
    ll = loglik_estimate(theta, data, n_mc, np.random.default_rng(replication_seed(seed, 0, 99)))
    out["ea"] = ll.value / ns
    out["ea_std_error"] = ll.std_error / ns
    return out


def cmd_loglik(args) -> int:
    theta = load_params(args.params)
    data = read_trajectories(args.data)
    seed = 0 if args.seed is None else args.seed
    ll = loglik_estimate(theta, data, args.mc, np.random.default_rng(replication_seed(seed, 0, 99)))
    doc = {
        "schema_version": SCHEMA_VERSION,
        "value": ll.value,
        "std_error": ll.std_error,
        "n_mc": ll.n_mc,
        "subdivided_segments": ll.subdivided,
        "n_segments": data.n_segments,
        "config": {"params": str(args.params), "data": str(args.data), "mc": args.mc, "seed": seed},
    }
    _write(args.out, _dump(doc))
    return EXIT_OK


def _parse_grid(text, fallback) -> GridSpec:
    if text is None:
        return fallback
    try:
        x0, x1, y0, y1, res = text.split(",")
        return GridSpec((float(x0), float(x1)), (float(y0), float(y1)), int(res))
    except ValueError as exc:
        raise UsageError(f"--grid expects x0,x1,y0,y1,resolution ({exc})") from None


def cmd_map(args) -> int:
    theta = load_params(args.params)
    truth = load_params(args.truth) if args.truth else None
    grid = _parse_grid(args.grid, default_grid((truth or theta).potential))
    if truth is None:
        values = potential_grid(theta.potential, grid)
        doc = {"schema_version": SCHEMA_VERSION, "grid": grid.to_dict(), "kind": "potential"}
    else:
        mm = map_metrics(theta.potential, truth.potential, grid)
        values = mm.abs_error_grid
        doc = {"schema_version": SCHEMA_VERSION, "grid": grid.to_dict(), "kind": "abs_error", "ise": mm.ise}
        print(f"ise {mm.ise:.6g}")
    doc["config"] = {"params": str(args.params), "truth": args.truth and str(args.truth)}
    _write(args.out, grid_csv(grid, values))
    if args.metrics:
        _write(args.metrics, _dump(doc))
    return EXIT_OK


def cmd_study(args) -> int:
    cfg = _base_config(args)
    sc = cfg.scenario
    over = {k: v for k, v in (("g", args.g), ("n", args.n), ("replications", args.replications), ("seed", args.seed)) if v is not None}
    sc = replace(sc, **over)
    opt = _opt_config(args, cfg)
    if args.seed is None:
        opt = replace(opt, seed=sc.seed)
    em = _em_config(args, cfg, opt.seed)
    methods = tuple(normalize_method(m) for m in args.methods) if args.methods else cfg.methods
    em_reps = args.em_replications if args.em_replications is not None else cfg.em_replications
    dts = args.dt or [sc.dt]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for dt in dts:
        scen = replace(sc, dt=float(dt))
        scfg = StudyConfig(methods=methods, optimizer=opt, em=em, em_replications=em_reps, grid=cfg.grid)
        report = run_study(scen, scfg)
        tag = f"dt{float(dt):g}"
        _write(out / f"study_{tag}.json", _dump(report))
        for m, (grid, err) in median_error_grids(report, scen).items():
            _write(out / f"median_abs_error_{tag}_{m}.csv", grid_csv(grid, err))
        for m, s in report["summary"].items():
            if "ise" in s:
                print(f"dt={dt:g} {m}: median ISE {s['ise']['median']:.4g}, centers recovered {s['centers_recovered']}/{s['fits']}, median |gamma err| {s['gamma_abs_error']['median']:.4g}")
            else:
                print(f"dt={dt:g} {m}: no successful fit")
    return EXIT_OK


def cmd_compare(args) -> int:
    if len(args.fits) < 1:
        raise UsageError("--fits needs at least one file")
    data = read_trajectories(args.data)
    seed = 0 if args.seed is None else args.seed
    rows = []
    for path in args.fits:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        theta = load_params(path)
        vals = evaluate_criteria(theta, data, args.mc, seed)
        rows.append({"fit": str(path), "method": doc.get("method"), "values": vals})
    best = {}
    for c in CRITERIA:
        col = [r["values"][c] for r in rows]
        best[c] = int(np.argmax(col))
    doc = {
        "schema_version": SCHEMA_VERSION,
        "criteria": list(CRITERIA),
        "normalization": "divided by number of segments",
        "n_segments": data.n_segments,
        "rows": rows,
        "column_max_row": best,
        "config": {"fits": [str(p) for p in args.fits], "data": str(args.data), "mc": args.mc, "seed": seed},
    }
    _write(args.out, _dump(doc))
    width = max(len(r["method"] or "?") for r in rows)
    print(" " * width + "".join(f"{c:>14}" for c in CRITERIA))
    for i, r in enumerate(rows):
        cells = "".join(f"{r['values'][c]:>13.5f}{'*' if best[c] == i else ' '}" for c in CRITERIA)
        print(f"{(r['method'] or '?'):<{width}}{cells}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------


def build_parser() -> Parser:
    p = Parser(prog="driftscape", description="Potential-based movement SDE: simulation, fitting and comparison.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("simulate", help="simulate trajectories from a scenario")
    s.add_argument("--config")
    s.add_argument("--dt", type=float)
    s.add_argument("--g", type=int)
    s.add_argument("--n", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--replication", type=int, default=0)
    s.add_argument("--mode", choices=("exact", "euler-fine"), default="exact")
    s.add_argument("--anonymize", action="store_true", help="recenter and rescale coordinates")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    def fit_flags(q):
        q.add_argument("--config")
        q.add_argument("--restarts", type=int)
        q.add_argument("--max-evals", type=int)
        q.add_argument("--seed", type=int)
        q.add_argument("--n-bridges", type=int)
        q.add_argument("--max-iters", type=int)
        q.add_argument("--mstep-evals", type=int)

    f = sub.add_parser("fit", help="fit a model to trajectory data")
    f.add_argument("--method", required=True, choices=("euler", "ozaki", "kessler", "adaptive-kessler", "ea-mcem"))
    f.add_argument("--data", required=True)
    f.add_argument("--k", type=int, default=2)
    f.add_argument("--out", required=True)
    fit_flags(f)
    f.set_defaults(func=cmd_fit)

    l = sub.add_parser("loglik", help="Monte Carlo exact log-likelihood")
    l.add_argument("--params", required=True)
    l.add_argument("--data", required=True)
    l.add_argument("--mc", type=int, default=64)
    l.add_argument("--seed", type=int)
    l.add_argument("--out", default="-")
    l.set_defaults(func=cmd_loglik)

    m = sub.add_parser("map", help="potential surface or error map on a grid")
    m.add_argument("--params", required=True)
    m.add_argument("--truth")
    m.add_argument("--grid", help="x0,x1,y0,y1,resolution")
    m.add_argument("--out", required=True)
    m.add_argument("--metrics")
    m.set_defaults(func=cmd_map)

    st = sub.add_parser("study", help="replicated simulation study")
    st.add_argument("--dt", type=float, nargs="+")
    st.add_argument("--g", type=int)
    st.add_argument("--n", type=int)
    st.add_argument("--replications", type=int)
    st.add_argument("--methods", nargs="+")
    st.add_argument("--em-replications", type=int)
    st.add_argument("--out", required=True)
    fit_flags(st)
    st.set_defaults(func=cmd_study)

    c = sub.add_parser("compare", help="evaluate fits under every criterion")
    c.add_argument("--fits", nargs="+", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--mc", type=int, default=64)
    c.add_argument("--seed", type=int)
    c.add_argument("--out", default="-")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"driftscape: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"driftscape: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"driftscape: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, TypeError) as exc:
        print(f"driftscape: invalid input: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
