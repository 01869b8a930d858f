"""Maximum pseudo-likelihood fitting with multi-restart CMA-ES."""
from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field, replace

import cma
import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.optimize import minimize_scalar

from .data import TrajectorySet
from .errors import AllRestartsFailed, EmptyData, LengthMismatch
from .potential import MixturePotential, ModelParams, sym2_eigvals
from .transition import METHODS, contrast_batch, pseudo_loglik

SCHEMA_VERSION = 1
FIT_METHODS = METHODS + ("adaptive_kessler",)
INFEASIBLE = 1e300
EIG_FLOOR = 1e-9
LOG_CLIP = 10.0


def n_params(k: int, with_gamma=True) -> int:
    return 6 * k - (0 if with_gamma else 1)


# -- packing --------------------------------------------------------------------------


def pack(theta: ModelParams, with_gamma=True) -> np.ndarray:
    """Unconstrained vector ``[logits(K-1), centers(2K), log-Cholesky(3K), log gamma]``."""
    p = theta.potential
    w = p.weights
    logits = np.log(w[:-1] / w[-1])
    L = np.linalg.cholesky(p.info)
    chol = np.stack([np.log(L[:, 0, 0]), L[:, 1, 0], np.log(L[:, 1, 1])], axis=1)
    parts = [logits, p.centers.ravel(), chol.ravel()]
    if with_gamma:
        parts.append([math.log(theta.gamma)])
    return np.concatenate(parts)


def unpack_arrays(v, k: int, gamma=None):
    """Batched inverse of :func:`pack`.

    ``v`` has shape ``(..., 6k)`` (or ``(..., 6k-1)`` when ``gamma`` is fixed).
    Returns ``(weights, centers, info, gamma)`` arrays with the same leading
    shape. Any finite input maps to valid parameters: logs are clipped and the
    smallest information eigenvalue is floored at 1e-9 times (1 + trace).
    """
    v = np.asarray(v, dtype=float)
    expected = n_params(k, gamma is None)
    if v.shape[-1] != expected:
        raise LengthMismatch(f"expected {expected} coordinates for k={k}, got {v.shape[-1]}")
    lead = v.shape[:-1]
    logits = np.clip(v[..., : k - 1], -30.0, 30.0)
    z = np.concatenate([logits, np.zeros(lead + (1,))], axis=-1)
    z = z - z.max(-1, keepdims=True)
    w = np.exp(z)
    w = w / w.sum(-1, keepdims=True)
    o = k - 1
    centers = v[..., o : o + 2 * k].reshape(lead + (k, 2))
    o += 2 * k
    ch = v[..., o : o + 3 * k].reshape(lead + (k, 3))
    l11 = np.exp(np.clip(ch[..., 0], -LOG_CLIP, LOG_CLIP))
    l21 = np.clip(ch[..., 1], -1e4, 1e4)
    l22 = np.exp(np.clip(ch[..., 2], -LOG_CLIP, LOG_CLIP))
    a = l11 * l11
    b = l11 * l21
    c = l21 * l21 + l22 * l22
    lo, _ = sym2_eigvals(a, b, c)
    # relative floor so the shifted matrix stays definite after rounding
    floor = EIG_FLOOR * (1.0 + a + c)
    shift = np.where(lo < floor, floor - lo, 0.0)
    info = np.empty(lead + (k, 2, 2))
    info[..., 0, 0] = a + shift
    info[..., 0, 1] = info[..., 1, 0] = b
    info[..., 1, 1] = c + shift
    if gamma is None:
        g = np.exp(np.clip(v[..., -1], -20.0, 20.0))
    else:
        g = np.full(lead, float(gamma))
    return w, centers, info, g


def unpack(v, k: int, gamma=None) -> ModelParams:
    w, centers, info, g = unpack_arrays(np.asarray(v, dtype=float), k, gamma)
    if not np.all(np.isfinite(centers)):
        raise ValueError("centers must be finite")
    return ModelParams(MixturePotential.from_arrays(w, centers, info), float(g))


def canonicalize(theta: ModelParams) -> ModelParams:
    """Sort components by (center x, center y) to fix the labelling."""
    p = theta.potential
    order = np.lexsort((p.centers[:, 1], p.centers[:, 0]))
    comps = [p.components[i] for i in order]
    return ModelParams(MixturePotential(comps), theta.gamma)


# -- configuration and results ----------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    restarts: int = 30
    population: int = 0  # 0: CMA-ES default
    max_evals: int = 4000
    tolerance: float = 1e-6
    seed: int = 0
    init_box: tuple | None = None  # ((lo, hi), ...) per packed coordinate; None: from data
    sigma_scale: float = 0.05

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")


@dataclass
class OptimizeResult:
    best: np.ndarray
    value: float
    evaluations: int
    budget_exhausted: bool
    trace: list = field(default_factory=list)


@dataclass
class FitResult:
    theta_hat: ModelParams
    objective: float
    method: str
    restarts_used: int
    skipped_fraction: float
    evaluations: int
    seed: int
    restart_objectives: list = field(default_factory=list)
    history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "method": self.method,
            "theta_hat": self.theta_hat.to_dict(),
            "objective": self.objective,
            "restarts_used": self.restarts_used,
            "skipped_fraction": self.skipped_fraction,
            "evaluations": self.evaluations,
            "seed": self.seed,
            "restart_objectives": list(self.restart_objectives),
            "history": list(self.history),
            "extra": dict(self.extra),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        return cls(
            theta_hat=ModelParams.from_dict(d["theta_hat"]),
            objective=d["objective"],
            method=d["method"],
            restarts_used=d["restarts_used"],
            skipped_fraction=d["skipped_fraction"],
            evaluations=d["evaluations"],
            seed=d["seed"],
            restart_objectives=d.get("restart_objectives", []),
            history=d.get("history", []),
            extra=d.get("extra", {}),
        )


# -- optimizer ------------------------------------------------------------------------


def _cma_seed(seed: int, stream: int = 0) -> int:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, stream])
    return int(ss.generate_state(1)[0] % (2**31 - 2)) + 1


def optimize(objective, cfg: OptimizerConfig, x0=None, stds=None, batch=False, stream=0) -> OptimizeResult:
    """Derivative-free maximization with CMA-ES.

    ``objective`` maps a vector (or, with ``batch=True``, a ``(B, d)`` array) to
    a value where ``-inf`` marks infeasible points. The search starts at ``x0``
    with per-coordinate standard deviations ``stds``. The best-so-far value is
    returned, together with whether the evaluation budget ran out.
    """
    x0 = np.asarray(x0, dtype=float)
    d = len(x0)
    stds = np.ones(d) if stds is None else np.asarray(stds, dtype=float)
    opts = {
        "seed": _cma_seed(cfg.seed, stream),
        "maxfevals": cfg.max_evals,
        "tolfun": cfg.tolerance,
        "tolfunhist": cfg.tolerance,
        "tolx": 1e-9,
        "CMA_stds": stds.tolist(),
        "verbose": -9,
        "verb_log": 0,
        "verb_disp": 0,
    }
    if cfg.population:
        opts["popsize"] = cfg.population
    es = cma.CMAEvolutionStrategy(x0.tolist(), 1.0, opts)
    # the start point counts, so the result is never worse than x0
    v0 = objective(x0[None, :])[0] if batch else objective(x0)
    best_x, best_v = x0.copy(), float(v0) if np.isfinite(v0) else -np.inf
    evals = 1
    trace = [best_v]
    while not es.stop():
        # never overrun the budget with a partial generation
        if cfg.max_evals - evals < es.popsize:
            break
        sols = es.ask()
        X = np.array(sols)
        if batch:
            vals = np.asarray(objective(X), dtype=float)
        else:
            vals = np.array([objective(x) for x in X], dtype=float)
        evals += len(X)
        vals = np.where(np.isnan(vals), -np.inf, vals)
        i = int(np.argmax(vals))
        if vals[i] > best_v:
            best_v, best_x = float(vals[i]), X[i].copy()
        trace.append(best_v)
        es.tell(sols, np.where(np.isfinite(vals), -vals, INFEASIBLE).tolist())
    return OptimizeResult(best_x, best_v, evals, cfg.max_evals - evals < es.popsize, trace)


# -- fitting --------------------------------------------------------------------------


def default_init_box(data: TrajectorySet, k: int, with_gamma=True):
    """Per-coordinate sampling ranges for restart initial points."""
    lo, hi = data.bounding_box()
    pad = 0.2 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    box = [(-1.0, 1.0)] * (k - 1)
    for _ in range(k):
        box += [(lo[0], hi[0]), (lo[1], hi[1])]
    for _ in range(k):
        box += [(math.log(0.1), math.log(3.0)), (-0.5, 0.5), (math.log(0.1), math.log(3.0))]
    if with_gamma:
        lg = 0.5 * math.log(max(data.quadratic_variation_gamma2(), 1e-300))
        box.append((lg - 1.0, lg + 1.0))
    return np.array(box, dtype=float)


def initial_point(data: TrajectorySet, k: int, box, rng, with_gamma=True) -> np.ndarray:
    """Random restart point built from a k-means partition of the observed positions.

    Centers start at the cluster means and each information matrix is matched
    to the spread of its cluster through the local quadratic approximation of
    the stationary density, ``C = gamma^2 / (2 w) Sigma^-1``. Coordinates not
    set this way (and clusters with fewer than 3 points) are drawn uniformly
    in ``box``. The partition is randomized through k-means++ seeding.
    """
    x0 = rng.uniform(box[:, 0], box[:, 1])
    pts = data.all_positions()
    gamma2 = math.exp(2.0 * 0.5 * (box[-1, 0] + box[-1, 1]))
    if with_gamma:
        x0[-1] = 0.5 * math.log(gamma2)
    centers, labels = kmeans2(pts, k, minit="++", seed=rng)
    x0[: k - 1] = 0.0
    x0[k - 1 : 3 * k - 1] = centers.ravel()
    o = 3 * k - 1
    for j in range(k):
        members = pts[labels == j]
        if len(members) < 3:
            continue
        cov = np.cov(members.T) + 1e-6 * np.eye(2)
        info = gamma2 * k / 2.0 * np.linalg.inv(cov)
        L = np.linalg.cholesky(info)
        x0[o + 3 * j : o + 3 * j + 3] = (math.log(L[0, 0]), L[1, 0], math.log(L[1, 1]))
    return x0 if with_gamma else x0[: n_params(k, False)]


def _restart_rng(seed: int, r: int):
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, r]))


def _contrast_objective(method, seg, k, gamma=None):
    def f(V):
        V = np.atleast_2d(V)
        w, c, info, g = unpack_arrays(V, k, gamma)
        vals, _ = contrast_batch(method, w, c, info, g, seg)
        return vals

    return f


def _check_data(data, k):
    if data is None or len(data) == 0 or data.n_segments == 0:
        raise EmptyData("no segments to fit")
    if k < 1:
        raise ValueError("k must be >= 1")


def _finish(method, data, theta, cfg, restart_vals, evals, history=None, extra=None) -> FitResult:
    theta = canonicalize(theta)
    base = "kessler" if method == "adaptive_kessler" else method
    c = pseudo_loglik(base, theta, data)
    return FitResult(
        theta_hat=theta,
        objective=c.value,
        method=method,
        restarts_used=cfg.restarts,
        skipped_fraction=c.skipped / data.n_segments,
        evaluations=evals,
        seed=cfg.seed,
        restart_objectives=restart_vals,
        history=history or [],
        extra=extra or {},
    )


def _pick_best(results):
    vals = [v for _, v, _ in results]
    finite = [i for i, v in enumerate(vals) if np.isfinite(v)]
    if not finite:
        raise AllRestartsFailed("every restart ended at a non-finite objective")
    # argmax returns the lowest index among ties
    best = finite[int(np.argmax([vals[i] for i in finite]))]
    return best, vals


def _map(fn, items):
    n_jobs = int(os.environ.get("DRIFTSCAPE_THREADS", "1") or 1)
    if n_jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=n_jobs)(delayed(fn)(i) for i in items)


def fit(method: str, data: TrajectorySet, k: int, cfg: OptimizerConfig = OptimizerConfig()) -> FitResult:
    """Maximize a pseudo-log-likelihood over ``cfg.restarts`` random starts."""
    if method == "adaptive_kessler":
        return fit_adaptive_kessler(data, k, cfg)
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    _check_data(data, k)
    seg = data.segments()
    box = np.asarray(cfg.init_box, dtype=float) if cfg.init_box is not None else default_init_box(data, k)
    stds = cfg.sigma_scale * (box[:, 1] - box[:, 0])
    f = _contrast_objective(method, seg, k)

    def one(r):
        rng = _restart_rng(cfg.seed, r)
        x0 = initial_point(data, k, box, rng)
        res = optimize(f, cfg, x0=x0, stds=stds, batch=True, stream=r + 1)
        return res.best, res.value, res.evaluations

    results = _map(one, list(range(cfg.restarts)))
    best, vals = _pick_best(results)
    theta = unpack(results[best][0], k)
    evals = sum(e for _, _, e in results)
    return _finish(method, data, theta, cfg, vals, evals)


def fit_adaptive_kessler(data: TrajectorySet, k: int, cfg: OptimizerConfig = OptimizerConfig(), max_rounds=20) -> FitResult:
    """Kessler fit alternating a potential step (gamma fixed) and a gamma step.

    gamma^2 starts at the quadratic-variation estimate; rounds stop when the
    contrast improves by less than ``cfg.tolerance`` or after ``max_rounds``.
    """
    _check_data(data, k)
    seg = data.segments()
    gamma0 = math.sqrt(data.quadratic_variation_gamma2())
    box = np.asarray(cfg.init_box, dtype=float) if cfg.init_box is not None else default_init_box(data, k)
    eta_box = box[: n_params(k, False)]
    stds = cfg.sigma_scale * (eta_box[:, 1] - eta_box[:, 0])

    def contrast(eta, g):
        w, c, info, gg = unpack_arrays(np.atleast_2d(eta), k, g)
        return float(contrast_batch("kessler", w, c, info, gg, seg)[0][0])

    def one(r):
        rng = _restart_rng(cfg.seed, r)
        eta = initial_point(data, k, box, rng, with_gamma=False)
        g = gamma0
        value = contrast(eta, g)
        history = [value]
        evals = 1
        scale = 1.0
        for rnd in range(max_rounds):
            before = value
            step_cfg = cfg if rnd == 0 else replace(cfg, max_evals=max(100, cfg.max_evals // 4))
            res = optimize(_contrast_objective("kessler", seg, k, g), step_cfg, x0=eta, stds=scale * stds, batch=True, stream=1000 * (r + 1) + rnd)
            evals += res.evaluations
            if res.value > value:
                eta, value = res.best, res.value
            history.append(value)
            # gamma step on log scale
            lg = math.log(g)
            def neg(t):
                v = contrast(eta, math.exp(t))
                return -v if np.isfinite(v) else INFEASIBLE

            gs = minimize_scalar(
                neg,
                bounds=(lg - 2.0, lg + 2.0),
                method="bounded",
                options={"xatol": 1e-6},
            )
            evals += gs.nfev
            if -gs.fun > value:
                g, value = math.exp(gs.x), -gs.fun
            history.append(value)
            scale = 0.2
            if np.isfinite(before) and value - before < cfg.tolerance:
                break
        return np.append(eta, math.log(g)), value, evals, history

    results = _map(one, list(range(cfg.restarts)))
    best, vals = _pick_best([(r[0], r[1], r[2]) for r in results])
    theta = unpack(results[best][0], k)
    evals = sum(r[2] for r in results)
    return _finish("adaptive_kessler", data, theta, cfg, vals, evals, history=results[best][3], extra={"gamma0": gamma0})


def fit_result_config(cfg: OptimizerConfig) -> dict:
    d = asdict(cfg)
    if d["init_box"] is not None:
        d["init_box"] = [list(map(float, b)) for b in d["init_box"]]
    return d
