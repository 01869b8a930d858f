"""Simulation study harness: scenarios, replicated data, fits and map errors."""
from __future__ import annotations

import io
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Track, TrajectorySet
from .errors import DegenerateGrid, DriftscapeError
from .estimate import SCHEMA_VERSION, FitResult, OptimizerConfig, _map, fit, fit_result_config
from .exact import EmConfig, ea1_transition_sample, euler_fine_sample, fit_ea_mcem
from .potential import GaussianComponent, MixturePotential, ModelParams, mixture_terms, sym2_eigvals

log = logging.getLogger(__name__)

SIM_MODES = ("exact", "euler-fine")
STUDY_METHODS = ("euler", "ozaki", "kessler", "adaptive_kessler", "ea_mcem")
EULER_FINE_DIVISOR = 1000
CENTER_TOL = 0.5


def normalize_method(name: str) -> str:
    """Accept both ``adaptive-kessler`` and ``adaptive_kessler`` spellings."""
    m = name.strip().lower().replace("-", "_")
    if m not in STUDY_METHODS:
        raise ValueError(f"unknown method {name!r}; expected one of {', '.join(STUDY_METHODS)}")
    return m


@dataclass(frozen=True, eq=False)
class Scenario:
    theta_true: ModelParams
    g: int = 10
    n: int = 500
    dt: float = 1.0
    x0: tuple = (3.0, 2.0)
    replications: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.g < 1 or self.n < 2 or self.replications < 1:
            raise ValueError("scenario needs g >= 1, n >= 2 and replications >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))

    def to_dict(self) -> dict:
        return {
            "theta_true": self.theta_true.to_dict(),
            "g": self.g,
            "n": self.n,
            "dt": self.dt,
            "x0": list(self.x0),
            "replications": self.replications,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        theta = ModelParams.from_dict(d.pop("theta_true")) if "theta_true" in d else default_theta()
        return cls(theta_true=theta, **d)


def default_theta(gamma: float = 0.3) -> ModelParams:
    """Two anisotropic bumps at (0, 0) and (6, 4) with equal weights.

    A hand-picked reference surface for the benchmark, not a published one.
    gamma = 0.3 keeps the animal around the two centers over the whole
    500-step horizon at every sampling interval studied.
    """
    comps = [
        GaussianComponent(0.5, (0.0, 0.0), [[0.5, 0.2], [0.2, 0.3]]),
        GaussianComponent(0.5, (6.0, 4.0), [[0.25, -0.1], [-0.1, 0.6]]),
    ]
    return ModelParams(MixturePotential(comps), gamma)


def default_scenario(dt: float = 1.0, **kw) -> Scenario:
    return Scenario(theta_true=default_theta(), dt=dt, **kw)


def replication_seed(seed: int, r: int, stream: int = 0) -> np.random.SeedSequence:
    """Substream for replication ``r``; independent of how many replications run."""
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(r), int(stream)])


def simulate(scenario: Scenario, rng, mode: str = "exact") -> TrajectorySet:
    """G tracks of n points from ``x0`` at spacing ``dt``.

    ``exact`` chains exact transition draws; ``euler-fine`` runs Euler at
    ``dt / 1000`` and keeps every 1000th point (a cross-check only).
    """
    if mode not in SIM_MODES:
        raise ValueError(f"mode must be one of {SIM_MODES}")
    th = scenario.theta_true
    x = np.tile(np.asarray(scenario.x0, dtype=float), (scenario.g, 1))
    path = np.empty((scenario.n, scenario.g, 2))
    path[0] = x
    for i in range(1, scenario.n):
        if mode == "exact":
            x = ea1_transition_sample(th, x, scenario.dt, rng)
        else:
            x = euler_fine_sample(th, x, scenario.dt, scenario.dt / EULER_FINE_DIVISOR, rng)
        path[i] = x
    times = np.arange(scenario.n) * scenario.dt
    return TrajectorySet(Track(str(j), times, path[:, j]) for j in range(scenario.g))


def simulate_replication(scenario: Scenario, r: int, mode: str = "exact") -> TrajectorySet:
    return simulate(scenario, np.random.default_rng(replication_seed(scenario.seed, r)), mode)


# -- map errors ------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    x_range: tuple
    y_range: tuple
    resolution: int = 200

    def __post_init__(self):
        (x0, x1), (y0, y1) = self.x_range, self.y_range
        if not (np.isfinite([x0, x1, y0, y1]).all() and x1 > x0 and y1 > y0):
            raise DegenerateGrid(f"grid ranges must be finite and non-empty: {self.x_range}, {self.y_range}")
        if int(self.resolution) < 1:
            raise DegenerateGrid("grid resolution must be >= 1")
        object.__setattr__(self, "x_range", (float(x0), float(x1)))
        object.__setattr__(self, "y_range", (float(y0), float(y1)))
        object.__setattr__(self, "resolution", int(self.resolution))

    @property
    def cell_area(self) -> float:
        (x0, x1), (y0, y1) = self.x_range, self.y_range
        return (x1 - x0) * (y1 - y0) / self.resolution**2

    def midpoints(self):
        """Cell-center coordinate vectors ``(xs, ys)``."""
        r = self.resolution
        xs = self.x_range[0] + (np.arange(r) + 0.5) * (self.x_range[1] - self.x_range[0]) / r
        ys = self.y_range[0] + (np.arange(r) + 0.5) * (self.y_range[1] - self.y_range[0]) / r
        return xs, ys

    def refined(self, factor: int = 2) -> "GridSpec":
        return replace(self, resolution=self.resolution * factor)

    def to_dict(self) -> dict:
        return {"x_range": list(self.x_range), "y_range": list(self.y_range), "resolution": self.resolution}


def default_grid(p_true: MixturePotential, resolution: int = 200, radii: float = 4.0) -> GridSpec:
    """Bounding box of the centers, padded by ``radii`` standard deviations.

    A component's standard-deviation radius is ``1 / sqrt(smallest eigenvalue
    of C_k)``; the largest one over components is used on every side.
    """
    lo_eig = sym2_eigvals(p_true.info[:, 0, 0], p_true.info[:, 0, 1], p_true.info[:, 1, 1])[0]
    pad = radii * float(np.max(1.0 / np.sqrt(lo_eig)))
    lo = p_true.centers.min(axis=0) - pad
    hi = p_true.centers.max(axis=0) + pad
    return GridSpec((lo[0], hi[0]), (lo[1], hi[1]), resolution)


@dataclass(frozen=True, eq=False)
class MapMetrics:
    abs_error_grid: np.ndarray  # (resolution, resolution), indexed [ix, iy]
    ise: float
    grid_spec: GridSpec


def potential_grid(p: MixturePotential, grid: GridSpec) -> np.ndarray:
    xs, ys = grid.midpoints()
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    val, _, _ = mixture_terms(p.weights, p.centers, p.info, pts, hessian=False)
    return val.reshape(X.shape)


def map_metrics(p_est: MixturePotential, p_true: MixturePotential, grid: GridSpec | None = None) -> MapMetrics:
    """Absolute error surface and midpoint-rule integrated squared error."""
    grid = grid or default_grid(p_true)
    err = potential_grid(p_est, grid) - potential_grid(p_true, grid)
    ise = float(np.sum(err * err) * grid.cell_area)
    return MapMetrics(np.abs(err), ise, grid)


def grid_csv(grid: GridSpec, values: np.ndarray) -> str:
    """``x,y,value`` rows over the cell centers."""
    xs, ys = grid.midpoints()
    out = io.StringIO()
    out.write("x,y,value\n")
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            out.write(f"{float(x)!r},{float(y)!r},{float(values[i, j])!r}\n")
    return out.getvalue()


# -- study -----------------------------------------------------------------------------


def param_names(k: int) -> list:
    names = [f"w{j + 1}" for j in range(k)]
    for j in range(k):
        names += [f"mu{j + 1}_x", f"mu{j + 1}_y"]
    for j in range(k):
        names += [f"C{j + 1}_11", f"C{j + 1}_12", f"C{j + 1}_22"]
    return names + ["gamma"]


def param_values(theta: ModelParams) -> list:
    p = theta.potential
    vals = list(p.weights)
    vals += list(p.centers.ravel())
    for C in p.info:
        vals += [C[0, 0], C[0, 1], C[1, 1]]
    return [float(v) for v in vals] + [theta.gamma]


def centers_recovered(theta_hat: ModelParams, theta_true: ModelParams, tol=CENTER_TOL) -> bool:
    """Every true center has its own estimated center within ``tol`` (best matching)."""
    from itertools import permutations

    a = theta_hat.potential.centers
    b = theta_true.potential.centers
    if len(a) != len(b):
        return False
    best = min(max(np.linalg.norm(a[list(pi)] - b, axis=1)) for pi in permutations(range(len(a))))
    return bool(best <= tol)


@dataclass(frozen=True)
class StudyConfig:
    methods: tuple = ("euler", "ozaki", "kessler", "adaptive_kessler")
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    em: EmConfig = field(default_factory=EmConfig)
    em_replications: int | None = None  # cap on replications that run ea_mcem
    grid: GridSpec | None = None

    def to_dict(self) -> dict:
        return {
            "methods": list(self.methods),
            "optimizer": fit_result_config(self.optimizer),
            "em": asdict(self.em),
            "em_replications": self.em_replications,
            "grid": None if self.grid is None else self.grid.to_dict(),
        }


def fit_method(method: str, data: TrajectorySet, k: int, opt: OptimizerConfig, em: EmConfig, init=None) -> FitResult:
    method = normalize_method(method)
    if method == "ea_mcem":
        return fit_ea_mcem(data, k, em, opt, init=init)
    return fit(method, data, k, opt)


def _run_replication(scenario: Scenario, cfg: StudyConfig, r: int, grid: GridSpec) -> dict:
    data = simulate_replication(scenario, r)
    k = scenario.theta_true.k
    rows = {}
    fits = {}
    for method in cfg.methods:
        if method == "ea_mcem" and cfg.em_replications is not None and r >= cfg.em_replications:
            continue
        init = fits["ozaki"].theta_hat if method == "ea_mcem" and "ozaki" in fits else None
        try:
            res = fit_method(method, data, k, cfg.optimizer, cfg.em, init=init)
        except (DriftscapeError, ValueError, FloatingPointError) as exc:
            log.warning("replication %d, %s failed: %s", r, method, exc)
            rows[method] = {"error": f"{type(exc).__name__}: {exc}"}
            continue
        fits[method] = res
        th = res.theta_hat
        rows[method] = {
            "params": param_values(th),
            "objective": res.objective,
            "skipped_fraction": res.skipped_fraction,
            "ise": map_metrics(th.potential, scenario.theta_true.potential, grid).ise,
            "centers_recovered": centers_recovered(th, scenario.theta_true),
            "gamma_abs_error": abs(th.gamma - scenario.theta_true.gamma),
        }
    return {"replication": r, "fits": rows}


def _percentiles(values):
    a = np.asarray(values, dtype=float)
    return {
        "median": float(np.median(a)),
        "p2.5": float(np.percentile(a, 2.5)),
        "p97.5": float(np.percentile(a, 97.5)),
    }


def summarize(replications: list, names: list, theta_true: ModelParams, methods) -> dict:
    out = {}
    truth = dict(zip(names, param_values(theta_true)))
    for m in methods:
        ok = [rep["fits"][m] for rep in replications if m in rep["fits"] and "error" not in rep["fits"][m]]
        attempted = sum(1 for rep in replications if m in rep["fits"])
        if not ok:
            out[m] = {"fits": 0, "failures": attempted}
            continue
        P = np.array([row["params"] for row in ok])
        out[m] = {
            "fits": len(ok),
            "failures": attempted - len(ok),
            "params": {n: dict(_percentiles(P[:, i]), truth=truth[n]) for i, n in enumerate(names)},
            "ise": _percentiles([row["ise"] for row in ok]),
            "gamma_abs_error": _percentiles([row["gamma_abs_error"] for row in ok]),
            "skipped_fraction": _percentiles([row["skipped_fraction"] for row in ok]),
            "centers_recovered": int(sum(row["centers_recovered"] for row in ok)),
        }
    return out


def theta_from_values(values, k: int) -> ModelParams:
    """Inverse of :func:`param_values`; weights are renormalized to sum to one."""
    v = np.asarray(values, dtype=float)
    w = v[:k]
    centers = v[k : 3 * k].reshape(k, 2)
    c = v[3 * k : 6 * k].reshape(k, 3)
    info = [[[a, b], [b, d]] for a, b, d in c]
    return ModelParams(MixturePotential.from_arrays(w / w.sum(), centers, info), float(v[6 * k]))


def median_theta(report_method: dict, k: int) -> ModelParams | None:
    """Parameter built from per-coordinate medians (for the median map)."""
    if "params" not in report_method:
        return None
    med = [report_method["params"][n]["median"] for n in param_names(k)]
    try:
        return theta_from_values(med, k)
    except ValueError:
        return None


def run_study(scenario: Scenario, cfg: StudyConfig = StudyConfig()) -> dict:
    """Simulate every replication, fit each method and collect the metrics.

    Replications are independent (keyed substreams) and may run in parallel
    under ``DRIFTSCAPE_THREADS``; results do not depend on the worker count.
    """
    methods = tuple(normalize_method(m) for m in cfg.methods)
    cfg = replace(cfg, methods=methods)
    grid = cfg.grid or default_grid(scenario.theta_true.potential)
    reps = _map(lambda r: _run_replication(scenario, cfg, r, grid), list(range(scenario.replications)))
    names = param_names(scenario.theta_true.k)
    return {
        "schema_version": SCHEMA_VERSION,
        "scenario": scenario.to_dict(),
        "config": cfg.to_dict(),
        "grid": grid.to_dict(),
        "param_names": names,
        "replications": reps,
        "summary": summarize(reps, names, scenario.theta_true, methods),
    }


def median_error_grids(report: dict, scenario: Scenario) -> dict:
    """Per method, ``(grid, |P_median - P_true|)`` for plotting."""
    grid = GridSpec(**report["grid"])
    out = {}
    for m, summ in report["summary"].items():
        th = median_theta(summ, scenario.theta_true.k)
        if th is not None:
            out[m] = (grid, map_metrics(th.potential, scenario.theta_true.potential, grid).abs_error_grid)
    return out

