"""Gaussian-mixture potential surfaces and their calculus.

The potential is ``P(x) = sum_k w_k exp(-(x - mu_k)^T C_k (x - mu_k) / 2)`` and
the drift of the movement SDE is its gradient. Everything here works on point
arrays of shape ``(..., 2)``; the private ``mixture_terms`` kernel additionally
broadcasts over leading parameter-batch dimensions, which the estimators use to
score a whole optimizer population at once.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

WEIGHT_TOL = 1e-12
EIG_TOL = 1e-10


def sym2_eigvals(a, b, c):
    """Eigenvalues (low, high) of symmetric 2x2 matrices ``[[a, b], [b, c]]``."""
    mid = 0.5 * (a + c)
    rad = np.hypot(0.5 * (a - c), b)
    return mid - rad, mid + rad


@dataclass(frozen=True, eq=False)
class GaussianComponent:
    weight: float
    center: np.ndarray
    information: np.ndarray

    def __post_init__(self):
        center = np.array(self.center, dtype=float).reshape(2)
        info = np.array(self.information, dtype=float).reshape(2, 2)
        if not self.weight > 0:
            raise ValueError(f"component weight must be positive, got {self.weight}")
        if not np.all(np.isfinite(center)) or not np.all(np.isfinite(info)):
            raise ValueError("component center and information must be finite")
        if info[0, 1] != info[1, 0]:
            if abs(info[0, 1] - info[1, 0]) > 1e-12 * max(1.0, np.abs(info).max()):
                raise ValueError("information matrix must be symmetric")
            off = 0.5 * (info[0, 1] + info[1, 0])
            info[0, 1] = info[1, 0] = off
        lo, _ = sym2_eigvals(info[0, 0], info[0, 1], info[1, 1])
        if lo <= EIG_TOL:
            raise ValueError(f"information matrix must be positive definite (min eigenvalue {lo:.3g})")
        center.flags.writeable = False
        info.flags.writeable = False
        object.__setattr__(self, "weight", float(self.weight))
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "information", info)

    @property
    def max_eigenvalue(self) -> float:
        C = self.information
        return float(sym2_eigvals(C[0, 0], C[0, 1], C[1, 1])[1])


class MixturePotential:
    """Weighted sum of K Gaussian-shaped bumps with weights summing to one.

    Weights passed in are rescaled to sum to one. ``from_arrays`` also accepts
    K-1 free weights, the last one being ``1 - sum``.
    """

    def __init__(self, components: Sequence[GaussianComponent]):
        comps = list(components)
        if not comps:
            raise ValueError("a mixture needs at least one component")
        total = sum(c.weight for c in comps)
        if abs(total - 1.0) > WEIGHT_TOL:
            comps = [GaussianComponent(c.weight / total, c.center, c.information) for c in comps]
        self.components = tuple(comps)
        w = np.array([c.weight for c in comps])
        self.weights = w
        self.centers = np.stack([c.center for c in comps])
        self.info = np.stack([c.information for c in comps])
        for arr in (self.weights, self.centers, self.info):
            arr.flags.writeable = False
        assert abs(w.sum() - 1.0) <= WEIGHT_TOL

    @classmethod
    def from_arrays(cls, weights, centers, info) -> "MixturePotential":
        centers = np.asarray(centers, dtype=float).reshape(-1, 2)
        info = np.asarray(info, dtype=float).reshape(-1, 2, 2)
        k = len(centers)
        weights = np.atleast_1d(np.asarray(weights, dtype=float))
        if len(weights) == k - 1:
            weights = np.append(weights, 1.0 - weights.sum())
        if len(weights) != k or len(info) != k:
            raise ValueError("weights, centers and info must describe the same number of components")
        return cls([GaussianComponent(w, m, C) for w, m, C in zip(weights, centers, info)])

    @property
    def k(self) -> int:
        return len(self.components)

    def __len__(self):
        return self.k

    def __repr__(self):
        return f"MixturePotential(k={self.k}, weights={self.weights.round(4).tolist()}, centers={self.centers.round(4).tolist()})"

    def to_dict(self) -> list:
        return [
            {
                "weight": c.weight,
                "center": c.center.tolist(),
                "information": c.information.tolist(),
            }
            for c in self.components
        ]

    @classmethod
    def from_dict(cls, components: list) -> "MixturePotential":
        return cls([GaussianComponent(c["weight"], c["center"], c["information"]) for c in components])

    def translated(self, shift) -> "MixturePotential":
        shift = np.asarray(shift, dtype=float)
        return MixturePotential([GaussianComponent(c.weight, c.center + shift, c.information) for c in self.components])


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Full model parameter: potential plus scalar diffusion coefficient gamma."""

    potential: MixturePotential
    gamma: float

    def __post_init__(self):
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def k(self) -> int:
        return self.potential.k

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "components": self.potential.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        return cls(MixturePotential.from_dict(d["components"]), d["gamma"])

    def with_gamma(self, gamma: float) -> "ModelParams":
        return ModelParams(self.potential, gamma)


@dataclass(frozen=True)
class EaBounds:
    alpha_sq_upper: float
    lap_lower: float
    lap_upper: float
    m: float
    M: float
    rate: float


def _bump_parts(weights, centers, info, x):
    """Offsets, ``C d`` and weighted bump values, each with shape ``(*B, N, K)``.

    Written out in 2-D components; information matrices are symmetric.
    """
    d0 = x[..., :, None, 0] - centers[..., None, :, 0]
    d1 = x[..., :, None, 1] - centers[..., None, :, 1]
    a = info[..., None, :, 0, 0]
    b = info[..., None, :, 0, 1]
    c = info[..., None, :, 1, 1]
    cd0 = a * d0 + b * d1
    cd1 = b * d0 + c * d1
    wphi = weights[..., None, :] * np.exp(-0.5 * (d0 * cd0 + d1 * cd1))
    return cd0, cd1, wphi


def mixture_terms(weights, centers, info, x, hessian=True):
    """Value, gradient and (optionally) Hessian of a mixture potential.

    Parameter arrays may carry leading batch dimensions ``B``: weights
    ``(*B, K)``, centers ``(*B, K, 2)``, info ``(*B, K, 2, 2)``; points ``x`` are
    ``(*B, N, 2)`` or anything broadcasting against that.

    Returns ``(value, grad, hess)`` with shapes ``(*B, N)``, ``(*B, N, 2)`` and
    ``(*B, N, 2, 2)`` (``hess`` is None when not requested).
    """
    cd0, cd1, wphi = _bump_parts(weights, centers, info, x)
    value = wphi.sum(-1)
    grad = np.stack([-(wphi * cd0).sum(-1), -(wphi * cd1).sum(-1)], axis=-1)
    if not hessian:
        return value, grad, None
    h00 = (wphi * (cd0 * cd0 - info[..., None, :, 0, 0])).sum(-1)
    h01 = (wphi * (cd0 * cd1 - info[..., None, :, 0, 1])).sum(-1)
    h11 = (wphi * (cd1 * cd1 - info[..., None, :, 1, 1])).sum(-1)
    hess = np.stack([np.stack([h00, h01], -1), np.stack([h01, h11], -1)], -2)
    return value, grad, hess


def mixture_girsanov_terms(weights, centers, info, gamma, y):
    """``(H, |alpha|^2, laplacian H)`` at Lamperti coordinates ``y``.

    Batched like :func:`mixture_terms`; ``gamma`` has shape ``B`` (or scalar).
    """
    gamma = np.asarray(gamma, dtype=float)
    cd0, cd1, wphi = _bump_parts(weights, centers, info, gamma[..., None, None] * y)
    g2 = gamma[..., None] ** 2
    h = wphi.sum(-1) / g2
    gx = (wphi * cd0).sum(-1)
    gy = (wphi * cd1).sum(-1)
    alpha_sq = (gx * gx + gy * gy) / g2
    tr = info[..., None, :, 0, 0] + info[..., None, :, 1, 1]
    lap = (wphi * (cd0 * cd0 + cd1 * cd1 - tr)).sum(-1)
    return h, alpha_sq, lap


def _points(x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 2:
        raise ValueError(f"points must have a trailing dimension of 2, got shape {x.shape}")
    single = x.ndim == 1
    return x.reshape(-1, 2), single, x.shape[:-1]


def _terms(p: MixturePotential, x, hessian=True):
    pts, single, lead = _points(x)
    value, grad, hess = mixture_terms(p.weights, p.centers, p.info, pts, hessian)
    value = value.reshape(lead)
    grad = grad.reshape(lead + (2,))
    if hess is not None:
        hess = hess.reshape(lead + (2, 2))
    if single:
        value = float(value)
    return value, grad, hess


def potential_value(p: MixturePotential, x):
    return _terms(p, x, hessian=False)[0]


def drift(p: MixturePotential, x) -> np.ndarray:
    """Gradient of the potential at ``x``."""
    return _terms(p, x, hessian=False)[1]


def drift_jacobian(p: MixturePotential, x) -> np.ndarray:
    """Jacobian of the drift, i.e. the (symmetric) Hessian of the potential."""
    return _terms(p, x)[2]


def lamperti_drift(theta: ModelParams, y) -> np.ndarray:
    """Drift of the unit-diffusion process ``Y = X / gamma``."""
    g = theta.gamma
    return drift(theta.potential, g * np.asarray(y, dtype=float)) / g


def h_value(theta: ModelParams, y):
    """Antiderivative ``H(y) = P(gamma y) / gamma^2`` of the Lamperti drift."""
    g = theta.gamma
    return potential_value(theta.potential, g * np.asarray(y, dtype=float)) / g**2


def laplacian_h(theta: ModelParams, y):
    jac = drift_jacobian(theta.potential, theta.gamma * np.asarray(y, dtype=float))
    lap = jac[..., 0, 0] + jac[..., 1, 1]
    return float(lap) if np.ndim(lap) == 0 else lap


def ea_bounds(theta: ModelParams) -> EaBounds:
    """Global bounds on ``|alpha|^2`` and ``laplacian H`` for the mixture.

    ``|alpha|^2 <= e^-1 gamma^-2 pibar sum_k w_k lmax_k`` and
    ``-sum_k w_k tr C_k <= laplacian H <= 2 e^-1 sum_k w_k lmax_k``.
    """
    p = theta.potential
    w = p.weights
    lmax = sym2_eigvals(p.info[:, 0, 0], p.info[:, 0, 1], p.info[:, 1, 1])[1]
    pibar = w.sum()
    s = float(np.sum(w * lmax))
    alpha_sq_upper = np.exp(-1.0) * pibar * s / theta.gamma**2
    lap_lower = -float(np.sum(w * (p.info[:, 0, 0] + p.info[:, 1, 1])))
    lap_upper = 2.0 * np.exp(-1.0) * s
    m = lap_lower
    M = alpha_sq_upper + lap_upper
    return EaBounds(
        alpha_sq_upper=float(alpha_sq_upper),
        lap_lower=lap_lower,
        lap_upper=float(lap_upper),
        m=m,
        M=float(M),
        rate=float(0.5 * (M - m)),
    )


def phi(theta: ModelParams, bounds: EaBounds, y):
    """Shifted Girsanov integrand ``(|alpha|^2 + laplacian H - m) / 2``, in ``[0, rate]``."""
    a = lamperti_drift(theta, y)
    val = 0.5 * (np.sum(a * a, axis=-1) + laplacian_h(theta, y) - bounds.m)
    return float(val) if np.ndim(val) == 0 else val


def standard_potential() -> MixturePotential:
    """Single isotropic bump at the origin with identity information."""
    return MixturePotential([GaussianComponent(1.0, (0.0, 0.0), np.eye(2))])
