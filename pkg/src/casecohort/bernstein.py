"""Monotone Bernstein-polynomial representation of a cumulative hazard.

The baseline cumulative hazard is ``Lambda(t) = sum_j phi_j B_j(t)`` on
``[sigma, tau]`` with ``0 <= phi_0 <= ... <= phi_m``, and ``Lambda(0) = 0``.
Optimisation works on unconstrained ``psi`` with ``phi = cumsum(exp(psi))``,
so ``Lambda(t) = sum_l exp(psi_l) S_l(t)`` where ``S_l = sum_{j >= l} B_j``
is the tail sum of the basis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import comb

__all__ = [
    "SieveConfig",
    "SieveDomainError",
    "EXP_CAP",
    "PHI_FLOOR",
    "basis_eval",
    "basis_matrix",
    "tail_basis_matrix",
    "cumhaz_eval",
    "cumhaz_gradient",
    "to_monotone",
    "from_monotone",
    "bernstein_coefficients",
    "default_degree",
    "sieve_from_times",
]

EXP_CAP = 50.0
PHI_FLOOR = 1e-10
# Relative slack when checking that a time lies in [sigma, tau].
_EDGE_RTOL = 1e-12


class SieveDomainError(ValueError):
    """Evaluation outside the support ``{0} U [sigma, tau]``."""


@dataclass(frozen=True)
class SieveConfig:
    """Degree and support of the Bernstein sieve.

    ``bound`` is the optional cap on ``sum |phi_j|``; ``inf`` leaves the sieve
    unbounded.
    """

    degree: int
    sigma: float
    tau: float
    bound: float = math.inf

    def __post_init__(self):
        if int(self.degree) != self.degree or self.degree < 1:
            raise ValueError(f"degree must be a positive integer, got {self.degree!r}")
        if not (0 < self.sigma < self.tau < math.inf):
            raise ValueError(f"need 0 < sigma < tau < inf, got ({self.sigma}, {self.tau})")
        if not self.bound > 0:
            raise ValueError("bound must be positive")

    @property
    def n_coef(self) -> int:
        return self.degree + 1

    def grid(self, num=1000) -> np.ndarray:
        return np.linspace(self.sigma, self.tau, num)


def default_degree(n: int, rule: str = "fixed") -> int:
    """Bernstein degree: 3 by default, or ``ceil(n ** 0.25)`` with ``rule="auto"``."""
    if rule == "fixed":
        return 3
    if rule == "auto":
        return max(1, math.ceil(n ** 0.25))
    raise ValueError(f"unknown degree rule {rule!r}")


def sieve_from_times(times, degree: int = 3, bound: float = math.inf) -> SieveConfig:
    """Sieve whose support spans the smallest and largest positive finite time."""
    t = np.asarray(times, dtype=float)
    t = t[np.isfinite(t) & (t > 0)]
    if t.size == 0:
        raise ValueError("no positive finite times to span")
    lo, hi = float(t.min()), float(t.max())
    if not hi > lo:
        raise ValueError("all finite times are equal; the sieve support would be empty")
    return SieveConfig(degree=int(degree), sigma=lo, tau=hi, bound=bound)


def _scaled(t, config: SieveConfig):
    t = np.asarray(t, dtype=float)
    width = config.tau - config.sigma
    s = (t - config.sigma) / width
    slack = _EDGE_RTOL * max(1.0, config.tau / width)
    if np.any((s < -slack) | (s > 1 + slack)) or np.any(np.isnan(s)):
        raise SieveDomainError(
            f"time outside [{config.sigma}, {config.tau}]"
        )
    return np.clip(s, 0.0, 1.0)


def basis_eval(t, j: int, config: SieveConfig):
    """Bernstein basis polynomial ``B_j`` of degree ``config.degree`` at ``t``."""
    m = config.degree
    if not 0 <= j <= m:
        raise IndexError(f"basis index {j} outside 0..{m}")
    s = _scaled(t, config)
    return comb(m, j, exact=True) * s**j * (1.0 - s) ** (m - j)


def basis_matrix(t, config: SieveConfig) -> np.ndarray:
    """All basis values, shape ``t.shape + (m + 1,)``, for ``t`` in ``[sigma, tau]``."""
    m = config.degree
    s = _scaled(t, config)[..., None]
    j = np.arange(m + 1)
    binom = np.array([comb(m, k, exact=True) for k in j], dtype=float)
    return binom * s**j * (1.0 - s) ** (m - j)


def tail_basis_matrix(t, config: SieveConfig) -> np.ndarray:
    """Tail sums ``S_l(t) = sum_{j >= l} B_j(t)``; zero rows where ``t == 0``.

    ``t`` may contain ``0`` (where the hazard is identically zero) and
    values in ``[sigma, tau]``; anything else raises.
    """
    t = np.asarray(t, dtype=float)
    out = np.zeros(t.shape + (config.n_coef,))
    pos = t != 0
    if np.any(pos):
        b = basis_matrix(t[pos], config)
        out[pos] = np.cumsum(b[..., ::-1], axis=-1)[..., ::-1]
    return out


def to_monotone(psi) -> np.ndarray:
    """Map unconstrained ``psi`` to increasing positive ``phi = cumsum(exp(psi))``."""
    psi = np.asarray(psi, dtype=float)
    return np.cumsum(np.exp(np.minimum(psi, EXP_CAP)))


def from_monotone(phi) -> np.ndarray:
    """Inverse of :func:`to_monotone`; increments below ``1e-10`` are floored."""
    phi = np.asarray(phi, dtype=float)
    inc = np.diff(phi, prepend=0.0)
    return np.log(np.maximum(inc, PHI_FLOOR))


def _enforce_bound(phi, config: SieveConfig):
    if math.isinf(config.bound):
        return phi
    total = float(np.sum(np.abs(phi)))
    return phi * (config.bound / total) if total > config.bound else phi


def cumhaz_eval(phi, t, config: SieveConfig):
    """Evaluate ``Lambda(t)``; exactly zero at ``t = 0``."""
    phi = _enforce_bound(np.asarray(phi, dtype=float), config)
    if phi.shape[-1] != config.n_coef:
        raise ValueError(f"expected {config.n_coef} coefficients, got {phi.shape[-1]}")
    t = np.asarray(t, dtype=float)
    out = np.zeros(t.shape)
    pos = t != 0
    if np.any(pos):
        out[pos] = basis_matrix(t[pos], config) @ phi
    return out if out.ndim else float(out)


def cumhaz_gradient(psi, t, config: SieveConfig) -> np.ndarray:
    """Derivative of ``Lambda(t)`` with respect to ``psi``; component ``l`` is
    ``exp(psi_l) * S_l(t)``."""
    psi = np.asarray(psi, dtype=float)
    return np.exp(np.minimum(psi, EXP_CAP)) * tail_basis_matrix(t, config)


def bernstein_coefficients(func, config: SieveConfig) -> np.ndarray:
    """Coefficients that interpolate ``func`` at ``m + 1`` equispaced nodes.

    Exact for polynomials of degree at most ``m``.
    """
    nodes = np.linspace(config.sigma, config.tau, config.n_coef)
    return np.linalg.solve(basis_matrix(nodes, config), np.asarray(func(nodes), dtype=float))
