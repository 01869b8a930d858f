"""Gaussian transition approximations and pseudo-log-likelihood contrasts.

Three schemes are provided: Euler (frozen drift), Ozaki (drift linearized
around the segment start, giving an Ornstein-Uhlenbeck transition) and Kessler
(second-order moment expansion). The single-segment functions accept any
:class:`DriftField`; :func:`pseudo_loglik` and :func:`contrast_batch` are the
vectorized paths used for fitting.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Protocol

import numpy as np
from scipy.linalg import expm

from .data import Segments, TrajectorySet
from .errors import EmptyData, NonFiniteValue, NonPsdCovariance, SingularJacobian
from .potential import ModelParams, MixturePotential, drift, drift_jacobian, mixture_terms, sym2_eigvals

METHODS = ("euler", "ozaki", "kessler")
LOG_2PI = float(np.log(2.0 * np.pi))
SINGULAR_RTOL = 1e-12


class DriftField(Protocol):
    def value(self, x) -> np.ndarray: ...

    def jacobian(self, x) -> np.ndarray: ...


class PotentialDrift:
    """Gradient field of a mixture potential."""

    def __init__(self, potential: MixturePotential):
        self.potential = potential

    def value(self, x):
        return drift(self.potential, x)

    def jacobian(self, x):
        return drift_jacobian(self.potential, x)


class LinearDrift:
    """``f(x) = A (x - c)``."""

    def __init__(self, A, c=(0.0, 0.0)):
        self.A = np.asarray(A, dtype=float).reshape(2, 2)
        self.c = np.asarray(c, dtype=float).reshape(2)

    def value(self, x):
        return (np.asarray(x, dtype=float) - self.c) @ self.A.T

    def jacobian(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.A, x.shape[:-1] + (2, 2)).copy()


class ZeroDrift(LinearDrift):
    def __init__(self):
        super().__init__(np.zeros((2, 2)))


@dataclass(frozen=True, eq=False)
class GaussianTransition:
    mean: np.ndarray
    cov: np.ndarray
    psd: bool


class Contrast(NamedTuple):
    value: float
    skipped: int


def kronecker_sum(A, B):
    """``A (+) B = A kron I + I kron B``."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    return np.kron(A, np.eye(B.shape[0])) + np.kron(np.eye(A.shape[0]), B)


def _vec(M):
    return np.asarray(M).reshape(-1, order="F")


def _unvec(v, n=2):
    return np.asarray(v).reshape(n, n, order="F")


def _is_singular(J) -> bool:
    det = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
    return abs(det) < SINGULAR_RTOL * max(1.0, float(np.sum(J * J)))


def euler_transition(f: DriftField, x, dt: float, gamma: float) -> GaussianTransition:
    x = np.asarray(x, dtype=float)
    mean = x + dt * f.value(x)
    return GaussianTransition(mean, gamma**2 * dt * np.eye(2), True)


def ozaki_transition(f: DriftField, x, dt: float, gamma: float) -> GaussianTransition:
    """Local-linearization transition for one segment.

    Raises :class:`SingularJacobian` when the drift Jacobian at ``x`` is
    numerically singular; callers fall back to :func:`euler_transition`.
    """
    x = np.asarray(x, dtype=float)
    J = np.asarray(f.jacobian(x), dtype=float)
    if _is_singular(J):
        raise SingularJacobian(f"drift Jacobian is singular at {x.tolist()}")
    b = f.value(x)
    mean = x + (expm(J * dt) - np.eye(2)) @ np.linalg.solve(J, b)
    ks = kronecker_sum(J, J)
    vec_cov = np.linalg.solve(ks, (expm(ks * dt) - np.eye(4)) @ _vec(gamma**2 * np.eye(2)))
    cov = _unvec(vec_cov)
    cov = 0.5 * (cov + cov.T)
    lo = np.linalg.eigvalsh(cov)[0]
    assert lo >= -1e-12 * max(1.0, np.abs(cov).max()), "OU covariance must be PSD"
    return GaussianTransition(mean, cov, True)


def kessler_transition(f: DriftField, x, dt: float, gamma: float) -> GaussianTransition:
    x = np.asarray(x, dtype=float)
    J = np.asarray(f.jacobian(x), dtype=float)
    mean = x + dt * f.value(x)
    cov = gamma**2 * dt * (np.eye(2) + dt * J)
    cov = 0.5 * (cov + cov.T)
    lo, _ = sym2_eigvals(cov[0, 0], cov[0, 1], cov[1, 1])
    return GaussianTransition(mean, cov, bool(lo >= 0))


def gaussian_logpdf(t: GaussianTransition, y) -> float:
    """Bivariate normal log-density of ``y`` under ``t``."""
    det = t.cov[0, 0] * t.cov[1, 1] - t.cov[0, 1] * t.cov[1, 0]
    if not t.psd or not det > 0:
        raise NonPsdCovariance(f"covariance is not positive definite (det={det:.3g})")
    r = np.asarray(y, dtype=float) - t.mean
    sol = np.linalg.solve(t.cov, r)
    return float(-LOG_2PI - 0.5 * np.log(det) - 0.5 * r @ sol)


# -- vectorized contrasts -------------------------------------------------------


def _expm1_ratio(lam, dt):
    """``(exp(lam dt) - 1) / lam``, continuous at ``lam = 0``."""
    z = lam * dt
    small = np.abs(z) < 1e-8
    safe = np.where(small, 1.0, lam)
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.expm1(z) / safe
    return np.where(small, dt * (1.0 + 0.5 * z), out)


def segment_terms(method: str, weights, centers, info, gamma, seg: Segments):
    """Per-segment log transition densities for a batch of parameters.

    Returns ``(terms, skipped)`` of shape ``(*B, S)``. Skipped segments (Kessler
    covariance or expanded precision not PSD, or singular Jacobian for Ozaki) have ``skipped`` set;
    for Kessler their term is 0 and must be left out, for Ozaki the term holds
    the Euler fallback.
    """
    gamma = np.asarray(gamma, dtype=float)[..., None]
    g2dt = gamma**2 * seg.dt
    need_hess = method != "euler"
    _, b, J = mixture_terms(weights, centers, info, seg.start, hessian=need_hess)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        r = seg.end - seg.start - seg.dt[:, None] * b
        rr = np.einsum("...i,...i->...", r, r)
        euler = -LOG_2PI - np.log(g2dt) - 0.5 * rr / g2dt
        if method == "euler":
            return euler, np.zeros(euler.shape, dtype=bool)
        a, bb, c = J[..., 0, 0], J[..., 0, 1], J[..., 1, 1]
        if method == "kessler":
            lo, hi = sym2_eigvals(a, bb, c)
            # drop segments whose covariance or expanded precision is not PSD
            skipped = (1.0 + seg.dt * lo < 0) | (1.0 - seg.dt * hi < 0)
            rJr = a * r[..., 0] ** 2 + 2 * bb * r[..., 0] * r[..., 1] + c * r[..., 1] ** 2
            term = -LOG_2PI - np.log(g2dt) - 0.5 * seg.dt * (a + c) - 0.5 * (rr - seg.dt * rJr) / g2dt
            return np.where(skipped, 0.0, term), skipped
        if method != "ozaki":
            raise ValueError(f"unknown method {method!r}")
        # J is symmetric: work in its eigenbasis
        ang = 0.5 * np.arctan2(2 * bb, a - c)
        cs, sn = np.cos(ang), np.sin(ang)
        l1 = a * cs**2 + 2 * bb * sn * cs + c * sn**2
        l2 = a * sn**2 - 2 * bb * sn * cs + c * cs**2
        dt = seg.dt
        # mean offset from start: f(J) b with f(l) = expm1(l dt)/l
        bv1 = cs * b[..., 0] + sn * b[..., 1]
        bv2 = -sn * b[..., 0] + cs * b[..., 1]
        m1 = _expm1_ratio(l1, dt) * bv1
        m2 = _expm1_ratio(l2, dt) * bv2
        inc = seg.end - seg.start
        r1 = cs * inc[..., 0] + sn * inc[..., 1] - m1
        r2 = -sn * inc[..., 0] + cs * inc[..., 1] - m2
        v1 = gamma**2 * _expm1_ratio(2 * l1, dt)
        v2 = gamma**2 * _expm1_ratio(2 * l2, dt)
        term = -LOG_2PI - 0.5 * (np.log(v1) + np.log(v2) + r1**2 / v1 + r2**2 / v2)
        det = a * c - bb * bb
        fro = a * a + 2 * bb * bb + c * c
        singular = np.abs(det) < SINGULAR_RTOL * np.maximum(1.0, fro)
        return np.where(singular, euler, term), singular


def contrast_batch(method: str, weights, centers, info, gamma, seg: Segments):
    """Summed contrast and skipped count for a batch of parameters.

    Returns ``(values, skipped)``; a value is ``-inf`` when any retained term is
    non-finite or (Kessler) when every segment was skipped.
    """
    terms, skipped = segment_terms(method, weights, centers, info, gamma, seg)
    with np.errstate(invalid="ignore"):
        values = terms.sum(-1)
    n_skip = skipped.sum(-1)
    bad = ~np.isfinite(values)
    if method == "kessler":
        bad |= n_skip == terms.shape[-1]
    values = np.where(bad, -np.inf, values)
    return values, n_skip


def pseudo_loglik(method: str, theta: ModelParams, data: TrajectorySet) -> Contrast:
    """Sum of per-segment log transition densities under ``method``.

    Kessler segments are dropped when either the covariance
    ``gamma^2 dt (I + dt J)`` or its first-order inverse factor ``I - dt J`` is
    not PSD; Ozaki segments with
    a singular drift Jacobian use the Euler term. Both are counted in
    ``skipped``. If every Kessler segment is dropped the value is 0.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if data is None or len(data) == 0:
        raise EmptyData("no trajectories")
    seg = data.segments()
    if len(seg) == 0:
        raise EmptyData("no segments")
    p = theta.potential
    terms, skipped = segment_terms(method, p.weights, p.centers, p.info, theta.gamma, seg)
    kept = terms if method != "kessler" else terms[~skipped]
    if not np.all(np.isfinite(kept)):
        raise NonFiniteValue(f"{method} contrast has non-finite terms")
    return Contrast(float(kept.sum()), int(skipped.sum()))
