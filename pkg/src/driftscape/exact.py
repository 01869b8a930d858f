"""Exact simulation and likelihood machinery for unit-diffusion potential SDEs.

All sampling here happens in Lamperti coordinates ``Y = X / gamma`` where the
process has unit diffusion and drift ``alpha = grad H``. Bridges are proposed
from Brownian bridges and thinned against a Poisson process of intensity
``rate`` (the EA1 construction); the same Poisson points give an unbiased
estimator of ``E[exp(-int phi)]`` for the likelihood.

Batched routines work on flat arrays of sorted (group, time) pairs so that
thousands of bridges are handled without Python-level loops.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.optimize import minimize_scalar

from .data import TrajectorySet
from .errors import (
    EmptyData,
    NonPositiveEstimate,
    ProposalBudgetExceeded,
    TimeCollision,
    UnsortedTimes,
)
from .potential import ModelParams, ea_bounds, mixture_girsanov_terms, mixture_terms

log = logging.getLogger(__name__)

DEFAULT_MAX_PROPOSALS = 10**6
DELTA_MAX = 1.0
SUBDIVIDE_RATE_DT = 50.0
GH_NODES = 32


class ModelTarget:
    """Girsanov ingredients (H, phi, bounds) of a mixture model in Y coordinates."""

    def __init__(self, theta: ModelParams):
        self.theta = theta
        self.bounds = ea_bounds(theta)
        self.rate = self.bounds.rate
        self.m = self.bounds.m
        # P <= sum of weights = 1
        self.h_max = 1.0 / theta.gamma**2
        # upper bound on the eigenvalues of the Hessian of H
        self.curvature = self.bounds.lap_upper
        p = theta.potential
        self._args = (p.weights, p.centers, p.info, theta.gamma)

    def _terms(self, y):
        y = np.asarray(y, dtype=float).reshape(-1, 2)
        return mixture_girsanov_terms(*self._args, y)

    def h(self, y):
        return self._terms(y)[0]

    def alpha(self, y):
        y = np.asarray(y, dtype=float).reshape(-1, 2)
        w, c, info, g = self._args
        _, grad, _ = mixture_terms(w, c, info, g * y, hessian=False)
        return grad / g

    def integrand(self, y):
        """``laplacian H + |alpha|^2``."""
        _, a2, lap = self._terms(y)
        return a2 + lap

    def phi(self, y):
        return 0.5 * (self.integrand(y) - self.m)


def as_target(obj):
    return ModelTarget(obj) if isinstance(obj, ModelParams) else obj


@dataclass(frozen=True, eq=False)
class Skeleton:
    times: np.ndarray
    points: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    dt: float
    bound_rate: float

    def __len__(self):
        return len(self.times)


@dataclass(frozen=True)
class EmConfig:
    n_bridges: int = 10
    n_times: int | None = None  # None: max(2, ceil(5 dt)) per segment
    max_iters: int = 30
    theta_tol: float = 1e-3
    seed: int = 0
    gamma_mode: str = "profile"
    n_mc_profile: int = 32
    mstep_evals: int = 1500

    def __post_init__(self):
        if self.n_bridges < 1:
            raise ValueError("n_bridges must be >= 1")
        if self.n_times is not None and self.n_times < 1:
            raise ValueError("n_times must be >= 1")
        if self.gamma_mode not in ("fixed", "profile"):
            raise ValueError("gamma_mode must be 'fixed' or 'profile'")

    def times_for(self, dt):
        if self.n_times is not None:
            return np.full(np.shape(dt), self.n_times, dtype=int)
        return np.maximum(2, np.ceil(5.0 * np.asarray(dt) - 1e-9)).astype(int)


class LoglikEstimate(NamedTuple):
    value: float
    std_error: float
    n_mc: int
    subdivided: int = 0


# -- Brownian bridges -----------------------------------------------------------


def brownian_bridge_sample(y0, y1, dt, times, rng) -> np.ndarray:
    """Standard 2-D Brownian bridge from ``(0, y0)`` to ``(dt, y1)`` at ``times``.

    Points are generated left to right, each conditioned on the previous one
    and the right endpoint.
    """
    times = np.asarray(times, dtype=float).reshape(-1)
    if len(times) == 0:
        return np.empty((0, 2))
    if np.any(np.diff(times) <= 0) or times[0] <= 0 or times[-1] >= dt:
        raise UnsortedTimes("bridge times must be strictly increasing inside (0, dt)")
    y1 = np.asarray(y1, dtype=float)
    out = np.empty((len(times), 2))
    s, w = 0.0, np.asarray(y0, dtype=float)
    for i, t in enumerate(times):
        frac = (t - s) / (dt - s)
        mean = w + frac * (y1 - w)
        var = (t - s) * (dt - t) / (dt - s)
        w = mean + math.sqrt(var) * rng.standard_normal(2)
        out[i] = w
        s = t
    return out


def grouped_bridge(gid, s, T, a, b, rng) -> np.ndarray:
    """Brownian-bridge points for many independent bridges at once.

    ``gid`` (sorted) indexes bridges, ``s`` are times measured from each bridge
    start (increasing within a group), and bridge ``g`` runs from ``a[g]`` at 0
    to ``b[g]`` at ``T[g]``. Uses ``B(s) = a + W(s) - (s/T)(W(T) - (b - a))``.
    """
    n = len(s)
    if n == 0:
        return np.empty((0, 2))
    first = np.empty(n, dtype=bool)
    first[0] = True
    first[1:] = gid[1:] != gid[:-1]
    last = np.empty(n, dtype=bool)
    last[-1] = True
    last[:-1] = first[1:]
    prev = np.empty(n)
    prev[0] = 0.0
    prev[1:] = s[:-1]
    prev[first] = 0.0
    ds = s - prev
    if np.any(ds < 0):
        raise UnsortedTimes("times must increase within each bridge")
    inc = np.sqrt(ds)[:, None] * rng.standard_normal((n, 2))
    cs = np.cumsum(inc, axis=0)
    start_idx = np.maximum.accumulate(np.where(first, np.arange(n), 0))
    W = cs - (cs - inc)[start_idx]
    g_last = gid[last]
    WT = W[last] + np.sqrt(T[g_last] - s[last])[:, None] * rng.standard_normal((len(g_last), 2))
    # map each element to its group's terminal value
    grp_pos = np.cumsum(first) - 1
    WT_e = WT[grp_pos]
    frac = (s / T[gid])[:, None]
    return a[gid] + W - frac * (WT_e - (b[gid] - a[gid]))


def _uniform_sorted_times(counts, dts, rng):
    """Flat sorted-within-group uniform times on (0, dt_g) with given counts."""
    gid = np.repeat(np.arange(len(counts)), counts)
    t = rng.uniform(size=len(gid)) * dts[gid]
    order = np.lexsort((t, gid))
    return gid, t[order]


# -- EA1 bridge skeletons --------------------------------------------------------


def ea1_bridge(theta, y0, y1, dt, rng, max_proposals=DEFAULT_MAX_PROPOSALS):
    """Exact skeleton of the target bridge from ``y0`` to ``y1`` over ``dt``.

    ``theta`` is a :class:`ModelParams` or any object with ``rate`` and
    ``phi``. Returns ``(skeleton, proposals_used)``.
    """
    target = as_target(theta)
    y0 = np.asarray(y0, dtype=float)
    y1 = np.asarray(y1, dtype=float)
    rate = target.rate
    for n in range(1, max_proposals + 1):
        kappa = rng.poisson(rate * dt)
        psi = np.sort(rng.uniform(0.0, dt, kappa))
        upsilon = rng.uniform(0.0, rate, kappa)
        pts = brownian_bridge_sample(y0, y1, dt, psi, rng)
        if kappa == 0 or np.all(target.phi(pts) <= upsilon):
            return Skeleton(psi, pts, y0, y1, float(dt), float(rate)), n
    raise ProposalBudgetExceeded(f"no bridge accepted after {max_proposals} proposals (rate*dt={rate * dt:.3g})")


@dataclass
class SkeletonBatch:
    """Accepted skeletons for many bridges, stored flat and sorted by (gid, time)."""

    gid: np.ndarray
    times: np.ndarray
    points: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    dt: np.ndarray
    proposals: np.ndarray = field(default=None)


def _propose_round(target, y0, y1, dt, rng):
    """One EA1 proposal for each bridge; returns acceptance mask and skeleton parts."""
    kappa = rng.poisson(target.rate * dt)
    gid, t = _uniform_sorted_times(kappa, dt, rng)
    ups = rng.uniform(size=len(gid)) * target.rate
    pts = grouped_bridge(gid, t, dt, y0, y1, rng)
    if len(gid):
        bad = target.phi(pts) > ups
        n_bad = np.bincount(gid[bad], minlength=len(dt))
    else:
        n_bad = np.zeros(len(dt), dtype=int)
    return n_bad == 0, gid, t, pts


def ea1_acceptance(target, y0, y1, dt, n_trials: int, rng, chunk=100_000) -> np.ndarray:
    """Outcomes of ``n_trials`` independent EA1 proposals for one bridge.

    Returns a boolean array; its mean estimates the acceptance probability
    without waiting for ``n_trials`` accepted skeletons, which matters when
    the probability is small.
    """
    target = as_target(target)
    y0 = np.asarray(y0, dtype=float).reshape(1, 2)
    y1 = np.asarray(y1, dtype=float).reshape(1, 2)
    out = []
    for start in range(0, n_trials, chunk):
        m = min(chunk, n_trials - start)
        ok, _, _, _ = _propose_round(target, np.repeat(y0, m, 0), np.repeat(y1, m, 0), np.full(m, float(dt)), rng)
        out.append(ok)
    return np.concatenate(out) if out else np.empty(0, dtype=bool)


def ea1_bridges(target, y0, y1, dt, rng, max_proposals=DEFAULT_MAX_PROPOSALS) -> SkeletonBatch:
    """Vectorized :func:`ea1_bridge` over many (y0, y1, dt) triples."""
    target = as_target(target)
    y0 = np.asarray(y0, dtype=float).reshape(-1, 2)
    y1 = np.asarray(y1, dtype=float).reshape(-1, 2)
    n = len(y0)
    dt = np.broadcast_to(np.asarray(dt, dtype=float), (n,)).copy()
    proposals = np.zeros(n, dtype=int)
    pending = np.arange(n)
    parts = []
    while len(pending):
        if proposals.max(initial=0) >= max_proposals:
            raise ProposalBudgetExceeded(f"bridges still pending after {max_proposals} proposals")
        proposals[pending] += 1
        ok, gid, t, pts = _propose_round(target, y0[pending], y1[pending], dt[pending], rng)
        keep = ok[gid]
        parts.append((pending[gid[keep]], t[keep], pts[keep]))
        pending = pending[~ok]
    gid = np.concatenate([p[0] for p in parts]) if parts else np.empty(0, int)
    t = np.concatenate([p[1] for p in parts]) if parts else np.empty(0)
    pts = np.concatenate([p[2] for p in parts]) if parts else np.empty((0, 2))
    order = np.lexsort((t, gid))
    return SkeletonBatch(gid[order], t[order], pts[order], y0, y1, dt, proposals)


def interpolate_batch(skel: SkeletonBatch, extra_gid, extra_t, rng) -> np.ndarray:
    """Sample every bridge at extra times, conditionally on its skeleton.

    ``extra_gid``/``extra_t`` must be sorted by (gid, time). Each extra point
    only depends on the two skeleton nodes (or endpoints) bracketing it.
    """
    extra_gid = np.asarray(extra_gid)
    extra_t = np.asarray(extra_t, dtype=float)
    ne = len(extra_t)
    if ne == 0:
        return np.empty((0, 2))
    nb = len(skel.dt)
    # nodes: left endpoints, skeleton points, right endpoints
    node_gid = np.concatenate([np.arange(nb), skel.gid, np.arange(nb)])
    node_t = np.concatenate([np.zeros(nb), skel.times, skel.dt])
    node_pts = np.concatenate([skel.y0, skel.points, skel.y1])
    all_gid = np.concatenate([node_gid, extra_gid])
    all_t = np.concatenate([node_t, extra_t])
    is_node = np.concatenate([np.ones(len(node_t), bool), np.zeros(ne, bool)])
    src = np.concatenate([np.arange(len(node_t)), np.arange(ne)])
    # nodes sort before extras at equal time so collisions are detectable
    order = np.lexsort((~is_node, all_t, all_gid))
    all_gid, all_t, is_node, src = all_gid[order], all_t[order], is_node[order], src[order]
    n = len(all_t)
    idx = np.arange(n)
    left = np.maximum.accumulate(np.where(is_node, idx, 0))
    right = np.minimum.accumulate(np.where(is_node, idx, n)[::-1])[::-1]
    ex = ~is_node
    li, ri = left[ex], right[ex]
    t_ex = all_t[ex]
    if np.any(all_t[li] >= t_ex) or np.any(all_t[ri] <= t_ex):
        raise TimeCollision("extra times must lie strictly inside (0, dt) and avoid skeleton times")
    # one sub-bridge per bracketing interval
    _, sub = np.unique(li, return_inverse=True)
    first = np.r_[True, sub[1:] != sub[:-1]]
    li_g, ri_g = li[first], ri[first]
    t0 = all_t[li_g]
    a = node_pts[src[li_g]]
    b = node_pts[src[ri_g]]
    T = all_t[ri_g] - t0
    pts = grouped_bridge(sub, t_ex - t0[sub], T, a, b, rng)
    out = np.empty((ne, 2))
    out[src[ex]] = pts
    return out


def skeleton_interpolate(skeleton: Skeleton, extra_times, rng) -> np.ndarray:
    """Points of the accepted bridge at ``extra_times`` given its skeleton."""
    extra = np.asarray(extra_times, dtype=float).reshape(-1)
    if len(extra) == 0:
        return np.empty((0, 2))
    if np.any(np.diff(extra) <= 0):
        raise UnsortedTimes("extra times must be strictly increasing")
    batch = SkeletonBatch(
        np.zeros(len(skeleton), int),
        skeleton.times,
        skeleton.points,
        skeleton.y0[None],
        skeleton.y1[None],
        np.array([skeleton.dt]),
    )
    return interpolate_batch(batch, np.zeros(len(extra), int), extra, rng)


# -- exact transitions ---------------------------------------------------------------


def _exact_step_y(target, y0, dt, rng, max_proposals):
    """One exact transition over ``dt`` for every row of ``y0`` (Y coordinates).

    The endpoint density ``exp(H(y) - |y - y0|^2 / 2dt)`` is sampled by
    rejection from a Gaussian built on the quadratic upper bound
    ``H(y) <= H(y0) + alpha(y0).(y - y0) + kappa |y - y0|^2 / 2`` (``kappa``
    bounds the Hessian of H from above); each accepted endpoint then gets one
    EA1 bridge proposal, and a rejected bridge sends that row back to the
    endpoint stage.
    """
    kappa = target.curvature
    prec = 1.0 / dt - kappa
    if prec <= 0:
        raise ValueError("time step too long for the quadratic endpoint envelope")
    sd = 1.0 / math.sqrt(prec)
    n = len(y0)
    out = np.empty_like(y0)
    h0 = target.h(y0)
    a0 = target.alpha(y0)
    pending = np.arange(n)
    dts = np.full(n, dt)
    rounds = 0
    while len(pending):
        rounds += 1
        if rounds > max_proposals:
            raise ProposalBudgetExceeded(f"exact transition not accepted after {max_proposals} proposals")
        d = a0[pending] / prec + sd * rng.standard_normal((len(pending), 2))
        cand = y0[pending] + d
        log_acc = target.h(cand) - h0[pending] - np.sum(a0[pending] * d, axis=1) - 0.5 * kappa * np.sum(d * d, axis=1)
        ok_end = np.log(rng.uniform(size=len(pending))) < log_acc
        sel = pending[ok_end]
        if len(sel):
            ok, *_ = _propose_round(target, y0[sel], cand[ok_end], dts[sel], rng)
            done = sel[ok]
            out[done] = cand[ok_end][ok]
            accepted = np.zeros(n, bool)
            accepted[done] = True
            pending = pending[~accepted[pending]]
    return out


def ea1_transition_sample(theta, x0, dt, rng, delta_max=DELTA_MAX, max_proposals=DEFAULT_MAX_PROPOSALS):
    """Exact draw(s) of ``X_dt`` given ``X_0 = x0`` under ``theta``.

    ``x0`` may be a single point or an ``(n, 2)`` array of independent starts.
    Steps longer than ``delta_max`` (or than half the inverse curvature bound of
    H) are chained over equal sub-steps.
    """
    target = as_target(theta)
    gamma = target.theta.gamma
    x0 = np.asarray(x0, dtype=float)
    single = x0.ndim == 1
    y = x0.reshape(-1, 2) / gamma
    max_step = min(delta_max, 0.5 / target.curvature) if target.curvature > 0 else delta_max
    chunks = max(1, math.ceil(dt / max_step - 1e-12))
    h = dt / chunks
    for _ in range(chunks):
        y = _exact_step_y(target, y, h, rng, max_proposals)
    x1 = gamma * y
    return x1[0] if single else x1


def euler_fine_sample(theta: ModelParams, x0, dt, step, rng) -> np.ndarray:
    """Fine Euler-Maruyama reference draws (used as an independent oracle)."""
    p = theta.potential
    X = np.array(x0, dtype=float).reshape(-1, 2).T.copy()  # component-major for speed
    n_steps = max(1, int(round(dt / step)))
    h = dt / n_steps
    sd = theta.gamma * math.sqrt(h)
    comps = [(w, mu[0], mu[1], C[0, 0], C[0, 1], C[1, 1]) for w, mu, C in zip(p.weights, p.centers, p.info)]
    for _ in range(n_steps):
        g = np.zeros_like(X)
        for w, m0, m1, a, b, c in comps:
            d0 = X[0] - m0
            d1 = X[1] - m1
            c0 = a * d0 + b * d1
            c1 = b * d0 + c * d1
            e = w * np.exp(-0.5 * (d0 * c0 + d1 * c1))
            g[0] -= e * c0
            g[1] -= e * c1
        X += h * g + sd * rng.standard_normal(X.shape)
    return X.T.copy()


# -- likelihood estimation -------------------------------------------------------------


def poisson_estimates(target, y0, y1, dt, n_mc, rng):
    """Replicates of the unbiased estimator of ``E_bridge[exp(-int_0^dt phi)]``.

    Returns an ``(n_segments, n_mc)`` array; each entry is the product of
    ``1 - phi/rate`` over a Poisson(rate dt) number of uniform bridge points.
    """
    y0 = np.asarray(y0, dtype=float).reshape(-1, 2)
    y1 = np.asarray(y1, dtype=float).reshape(-1, 2)
    ns = len(y0)
    dt = np.broadcast_to(np.asarray(dt, dtype=float), (ns,))
    rate = target.rate
    if rate <= 0:
        return np.ones((ns, n_mc))
    rep_dt = np.repeat(dt, n_mc)
    rep_y0 = np.repeat(y0, n_mc, axis=0)
    rep_y1 = np.repeat(y1, n_mc, axis=0)
    kappa = rng.poisson(rate * rep_dt)
    gid, t = _uniform_sorted_times(kappa, rep_dt, rng)
    pts = grouped_bridge(gid, t, rep_dt, rep_y0, rep_y1, rng)
    est = np.ones(len(rep_dt))
    if len(gid):
        ratio = 1.0 - target.phi(pts) / rate
        with np.errstate(divide="ignore"):
            logs = np.bincount(gid, weights=np.log(np.clip(ratio, 0.0, None)), minlength=len(rep_dt))
        est = np.exp(logs)
    return est.reshape(ns, n_mc)


def _subdivided_estimates(target, y0, y1, dt, n_mc, rng):
    """Midpoint-split estimate of the bridge expectation for very long segments.

    The midpoint is integrated with a tensor Gauss-Hermite rule against its
    Brownian-bridge law ``N((y0+y1)/2, dt/4 I)``. Returns ``(mean, var_of_mean)``.
    """
    xi, w = np.polynomial.hermite.hermgauss(GH_NODES)
    zx, zy = np.meshgrid(xi, xi, indexing="ij")
    nodes = np.stack([zx.ravel(), zy.ravel()], axis=1)
    weights = np.outer(w, w).ravel() / np.pi
    z = 0.5 * (y0 + y1) + math.sqrt(dt / 2.0) * nodes
    e1 = poisson_estimates(target, np.broadcast_to(y0, z.shape), z, dt / 2, n_mc, rng)
    e2 = poisson_estimates(target, z, np.broadcast_to(y1, z.shape), dt / 2, n_mc, rng)
    m1, m2 = e1.mean(1), e2.mean(1)
    v1 = e1.var(1, ddof=1) / n_mc if n_mc > 1 else np.zeros_like(m1)
    v2 = e2.var(1, ddof=1) / n_mc if n_mc > 1 else np.zeros_like(m2)
    mean = float(np.sum(weights * m1 * m2))
    var = float(np.sum(weights**2 * (v1 * m2**2 + m1**2 * v2 + v1 * v2)))
    return mean, var


def loglik_estimate(theta, data: TrajectorySet, n_mc: int, rng, gamma=None, chunk=200_000) -> LoglikEstimate:
    """Monte Carlo estimate of the exact log-likelihood of ``data``.

    Each transition density factorizes as a Brownian kernel times
    ``exp(H(y1) - H(y0) - m dt / 2)`` times a bridge expectation estimated by
    :func:`poisson_estimates`, times ``gamma^-2`` for the change of variables.
    The standard error is a delta-method approximation.

    ``theta`` may also be a custom target object; then ``gamma`` must be given.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    if data is None or len(data) == 0:
        raise EmptyData("no trajectories")
    target = as_target(theta)
    if gamma is None:
        gamma = target.theta.gamma
    seg = data.segments()
    y0 = seg.start / gamma
    y1 = seg.end / gamma
    dt = seg.dt
    ns = len(dt)
    diff = y1 - y0
    log_gauss = -np.log(2 * np.pi * dt) - 0.5 * np.sum(diff * diff, axis=1) / dt
    log_fixed = log_gauss + target.h(y1) - target.h(y0) - 0.5 * target.m * dt - 2.0 * math.log(gamma)

    means = np.empty(ns)
    var_of_mean = np.empty(ns)
    long = target.rate * dt > SUBDIVIDE_RATE_DT
    short_idx = np.flatnonzero(~long)
    expected = max(1.0, target.rate * float(np.mean(dt)))
    per_chunk = max(1, int(chunk / (n_mc * expected)))
    for lo in range(0, len(short_idx), per_chunk):
        idx = short_idx[lo : lo + per_chunk]
        est = poisson_estimates(target, y0[idx], y1[idx], dt[idx], n_mc, rng)
        means[idx] = est.mean(1)
        var_of_mean[idx] = est.var(1, ddof=1) / n_mc if n_mc > 1 else 0.0
    for i in np.flatnonzero(long):
        means[i], var_of_mean[i] = _subdivided_estimates(target, y0[i], y1[i], dt[i], n_mc, rng)
    if np.any(means <= 0):
        bad = int(np.sum(means <= 0))
        raise NonPositiveEstimate(f"{bad} segment estimate(s) are zero; increase n_mc")
    value = float(np.sum(log_fixed + np.log(means)))
    se = float(np.sqrt(np.sum(var_of_mean / means**2)))
    return LoglikEstimate(value, se, int(n_mc), int(long.sum()))


# -- Monte Carlo EM ------------------------------------------------------------------------


@dataclass
class EStepDraw:
    """Bridge points drawn under the current parameter, reused throughout an M-step."""

    points: np.ndarray  # (P, 2) Y coordinates at uniform times
    weights: np.ndarray  # (P,) dt_j / (M_j N_j)
    y_first: np.ndarray  # (G, 2)
    y_last: np.ndarray  # (G, 2)
    proposals: int
    bridges: int

    @property
    def acceptance(self) -> float:
        return self.bridges / self.proposals if self.proposals else 1.0


def draw_estep(theta_p, data_y: TrajectorySet, cfg: EmConfig, rng) -> EStepDraw:
    """Sample ``N_j`` conditioned bridges per segment at ``M_j`` uniform times each."""
    target = as_target(theta_p)
    seg = data_y.segments()
    nb = cfg.n_bridges
    y0 = np.repeat(seg.start, nb, axis=0)
    y1 = np.repeat(seg.end, nb, axis=0)
    dt = np.repeat(seg.dt, nb)
    m = np.repeat(cfg.times_for(seg.dt), nb)
    skel = ea1_bridges(target, y0, y1, dt, rng)
    gid, t = _uniform_sorted_times(m, dt, rng)
    pts = interpolate_batch(skel, gid, t, rng)
    w = (dt / (m * nb))[gid]
    first = np.array([tr.positions[0] for tr in data_y.tracks])
    last = np.array([tr.positions[-1] for tr in data_y.tracks])
    return EStepDraw(pts, w, first, last, int(skel.proposals.sum()), len(dt))


def q_value_batch(weights, centers, info, gamma, draw: EStepDraw) -> np.ndarray:
    """``Q^N`` for a batch of parameters (leading batch dimension on every array)."""
    h0, _, _ = mixture_girsanov_terms(weights, centers, info, gamma, draw.y_first)
    h1, _, _ = mixture_girsanov_terms(weights, centers, info, gamma, draw.y_last)
    _, a2, lap = mixture_girsanov_terms(weights, centers, info, gamma, draw.points)
    return (h1 - h0).sum(-1) - 0.5 * ((a2 + lap) * draw.weights).sum(-1)


def q_value(theta: ModelParams, draw: EStepDraw) -> float:
    p = theta.potential
    return float(q_value_batch(p.weights, p.centers, p.info, np.float64(theta.gamma), draw))


def mcem_q(theta: ModelParams, theta_p: ModelParams, data_y: TrajectorySet, cfg: EmConfig, rng) -> float:
    """Monte Carlo estimate of the EM intermediate quantity ``Q(theta, theta_p)``.

    ``data_y`` must already be in Lamperti coordinates (positions / gamma).
    """
    return q_value(theta, draw_estep(theta_p, data_y, cfg, rng))


def profile_gamma(theta: ModelParams, data: TrajectorySet, n_mc: int, seed: int, span=1.5, xtol=1e-3):
    """Maximize ``loglik_estimate`` over gamma with the potential fixed.

    Every evaluation reuses the same random stream so the profile is a fixed
    function of gamma during the search.
    """

    def neg(log_g):
        th = theta.with_gamma(math.exp(log_g))
        try:
            return -loglik_estimate(th, data, n_mc, np.random.default_rng(seed)).value
        except NonPositiveEstimate:
            return np.inf

    lg = math.log(theta.gamma)
    res = minimize_scalar(neg, bounds=(lg - math.log(span), lg + math.log(span)), method="bounded", options={"xatol": xtol})
    current = neg(lg)
    if res.fun < current:
        return theta.with_gamma(math.exp(res.x)), -res.fun
    return theta, -current


def _q_objective(draw: EStepDraw, k: int, gamma: float, max_elems=4_000_000):
    from .estimate import unpack_arrays

    n_pts = len(draw.points)

    def f(V):
        V = np.atleast_2d(V)
        w, c, info, g = unpack_arrays(V, k, gamma)
        step = max(1, max_elems // max(1, n_pts * k))
        out = np.empty(len(V))
        for lo in range(0, len(V), step):
            sl = slice(lo, lo + step)
            with np.errstate(over="ignore", invalid="ignore"):
                out[sl] = q_value_batch(w[sl], c[sl], info[sl], g[sl], draw)
        return np.where(np.isfinite(out), out, -np.inf)

    return f


def fit_ea_mcem(data: TrajectorySet, k: int, cfg: EmConfig = EmConfig(), opt=None, init=None):
    """Monte Carlo EM fit of the exact likelihood.

    Starts from ``init`` (a :class:`ModelParams`) or, by default, from the best
    Ozaki fit under ``opt``. Each round draws conditioned bridges under the
    current parameter, maximizes the frozen ``Q^N`` over the potential with
    gamma held fixed (CMA-ES warm-started at the current value) and then, in
    ``profile`` mode, re-estimates gamma on the Monte Carlo log-likelihood.
    The reported objective is :func:`loglik_estimate` at the final parameter.
    """
    from .estimate import FitResult, OptimizerConfig, canonicalize, fit, optimize, pack, unpack

    if data is None or len(data) == 0 or data.n_segments == 0:
        raise EmptyData("no segments to fit")
    opt = opt or OptimizerConfig(seed=cfg.seed)
    if init is None:
        init = fit("ozaki", data, k, opt).theta_hat
    theta = init
    history = []
    evals = 0
    ss = np.random.SeedSequence([int(cfg.seed) & 0xFFFFFFFF, 7])
    it_seeds = ss.spawn(cfg.max_iters)
    em_opt = OptimizerConfig(
        restarts=1,
        population=opt.population,
        max_evals=cfg.mstep_evals,
        tolerance=opt.tolerance,
        seed=opt.seed,
    )
    converged = False
    iters = 0
    for it in range(cfg.max_iters):
        iters = it + 1
        rng = np.random.default_rng(it_seeds[it])
        gamma = theta.gamma
        data_y = data.scaled(1.0 / gamma)
        draw = draw_estep(theta, data_y, cfg, rng)
        f = _q_objective(draw, k, gamma)
        v_old = pack(theta, with_gamma=False)
        q_old = float(f(v_old)[0])
        stds = np.full(len(v_old), 0.1)
        res = optimize(f, em_opt, x0=v_old, stds=stds, batch=True, stream=10_000 + it)
        evals += res.evaluations
        new = unpack(res.best, k, gamma) if res.value > q_old else theta
        if cfg.gamma_mode == "profile":
            pseed = int(rng.integers(2**31))
            new, _ = profile_gamma(new, data, cfg.n_mc_profile, pseed)
        step = np.linalg.norm(pack(new) - pack(theta)) / max(1.0, np.linalg.norm(pack(theta)))
        history.append({"iteration": iters, "q_before": q_old, "q_after": max(q_old, res.value), "gamma": new.gamma, "acceptance": draw.acceptance, "change": float(step)})
        log.debug("mcem iteration %d: Q %.4f -> %.4f, change %.3g", iters, q_old, res.value, step)
        theta = new
        if step < cfg.theta_tol:
            converged = True
            break
    theta = canonicalize(theta)
    ll = loglik_estimate(theta, data, cfg.n_mc_profile, np.random.default_rng(np.random.SeedSequence([int(cfg.seed) & 0xFFFFFFFF, 8])))
    return FitResult(
        theta_hat=theta,
        objective=ll.value,
        method="ea_mcem",
        restarts_used=opt.restarts,
        skipped_fraction=0.0,
        evaluations=evals,
        seed=cfg.seed,
        restart_objectives=[],
        history=history,
        extra={"std_error": ll.std_error, "n_mc": ll.n_mc, "iterations": iters, "converged": converged, "init": init.to_dict()},
    )
