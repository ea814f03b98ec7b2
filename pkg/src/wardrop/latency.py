"""Edge latency function families.

Each family exposes the latency value, its first two derivatives, and the
closed-form integral from zero (the congestion-potential integrand), all
vectorized over numpy arrays.  ``LatencyBundle`` packs one family per edge
into grouped arrays so solvers can evaluate a whole network in a few numpy
calls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

__all__ = [
    "BPR",
    "Affine",
    "Polynomial",
    "LatencyFamily",
    "LatencyBundle",
    "RegularityReport",
    "regularity",
]


def _check_domain(x):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("latency functions are defined for nonnegative flow only")
    return x


@dataclass(frozen=True)
class BPR:
    """Bureau of Public Roads curve t_f * (1 + alpha * (x / capacity)**beta)."""

    t_f: float
    capacity: float
    alpha: float = 0.15
    beta: float = 4.0

    def __post_init__(self):
        if self.t_f <= 0:
            raise ValueError(f"BPR free-flow time must be positive, got {self.t_f}")
        if self.capacity <= 0:
            raise ValueError(f"BPR capacity must be positive, got {self.capacity}")
        if self.alpha < 0:
            raise ValueError(f"BPR alpha must be nonnegative, got {self.alpha}")
        if self.beta < 1:
            raise ValueError(f"BPR beta must be >= 1, got {self.beta}")

    def eval(self, x):
        x = _check_domain(x)
        return self.t_f * (1.0 + self.alpha * (x / self.capacity) ** self.beta)

    def deriv(self, x):
        x = _check_domain(x)
        return (
            self.t_f
            * self.alpha
            * self.beta
            * x ** (self.beta - 1.0)
            / self.capacity**self.beta
        )

    def deriv2(self, x):
        x = _check_domain(x)
        if self.beta == 1.0:
            return np.zeros_like(x)
        return (
            self.t_f
            * self.alpha
            * self.beta
            * (self.beta - 1.0)
            * x ** (self.beta - 2.0)
            / self.capacity**self.beta
        )

    def integral(self, x):
        x = _check_domain(x)
        return self.t_f * x + self.t_f * self.alpha * x ** (self.beta + 1.0) / (
            (self.beta + 1.0) * self.capacity**self.beta
        )

    @property
    def strictly_increasing(self) -> bool:
        return self.alpha > 0

    def deriv_sup(self, q_max: float) -> float:
        # beta >= 1 makes the derivative nondecreasing, so the sup sits at q_max.
        return float(self.deriv(q_max))

    def deriv2_sup(self, q_max: float) -> float:
        if self.beta == 1.0 or self.alpha == 0.0:
            return 0.0
        if self.beta < 2.0:
            return math.inf  # x**(beta-2) blows up at zero flow
        return float(self.deriv2(q_max))


@dataclass(frozen=True)
class Affine:
    """Line a*x + b.  A zero slope gives a constant (flow-insensitive) latency."""

    a: float
    b: float

    def __post_init__(self):
        if self.a < 0 or self.b < 0:
            raise ValueError("affine latency needs nonnegative slope and intercept")
        if self.a == 0 and self.b == 0:
            raise ValueError("affine latency must be positive somewhere")

    def eval(self, x):
        x = _check_domain(x)
        return self.a * x + self.b

    def deriv(self, x):
        x = _check_domain(x)
        return np.full_like(x, self.a)

    def deriv2(self, x):
        x = _check_domain(x)
        return np.zeros_like(x)

    def integral(self, x):
        x = _check_domain(x)
        return 0.5 * self.a * x * x + self.b * x

    @property
    def strictly_increasing(self) -> bool:
        return self.a > 0

    def deriv_sup(self, q_max: float) -> float:
        return self.a

    def deriv2_sup(self, q_max: float) -> float:
        return 0.0


@dataclass(frozen=True)
class Polynomial:
    """Latency sum_k coeffs[k] * x**k with nonnegative coefficients."""

    coeffs: tuple = field(default=())

    def __post_init__(self):
        coeffs = tuple(float(c) for c in self.coeffs)
        if not coeffs or all(c == 0 for c in coeffs):
            raise ValueError("polynomial latency needs at least one positive coefficient")
        if any(c < 0 for c in coeffs):
            raise ValueError("polynomial latency coefficients must be nonnegative")
        object.__setattr__(self, "coeffs", coeffs)

    def eval(self, x):
        x = _check_domain(x)
        out = np.zeros_like(x)
        for k, c in enumerate(self.coeffs):
            out = out + c * x**k
        return out

    def deriv(self, x):
        x = _check_domain(x)
        out = np.zeros_like(x)
        for k, c in enumerate(self.coeffs):
            if k >= 1:
                out = out + k * c * x ** (k - 1)
        return out

    def deriv2(self, x):
        x = _check_domain(x)
        out = np.zeros_like(x)
        for k, c in enumerate(self.coeffs):
            if k >= 2:
                out = out + k * (k - 1) * c * x ** (k - 2)
        return out

    def integral(self, x):
        x = _check_domain(x)
        out = np.zeros_like(x)
        for k, c in enumerate(self.coeffs):
            out = out + c * x ** (k + 1) / (k + 1)
        return out

    @property
    def strictly_increasing(self) -> bool:
        return any(c > 0 for k, c in enumerate(self.coeffs) if k >= 1)

    def deriv_sup(self, q_max: float) -> float:
        # nonnegative coefficients make the derivative nondecreasing
        return float(self.deriv(q_max))

    def deriv2_sup(self, q_max: float) -> float:
        return float(self.deriv2(q_max))


LatencyFamily = Union[BPR, Affine, Polynomial]

_KNOWN_KINDS = (BPR, Affine, Polynomial)


class LatencyBundle:
    """One latency family per edge, evaluated with one numpy pass per kind."""

    def __init__(self, families: Sequence[LatencyFamily]):
        families = list(families)
        for f in families:
            if not isinstance(f, _KNOWN_KINDS):
                raise TypeError(f"unsupported latency family: {f!r}")
        self.families = families
        self.n = len(families)
        self._groups = []
        bpr_idx = [i for i, f in enumerate(families) if isinstance(f, BPR)]
        if bpr_idx:
            self._groups.append(
                (
                    "bpr",
                    np.array(bpr_idx),
                    (
                        np.array([families[i].t_f for i in bpr_idx]),
                        np.array([families[i].capacity for i in bpr_idx]),
                        np.array([families[i].alpha for i in bpr_idx]),
                        np.array([families[i].beta for i in bpr_idx]),
                    ),
                )
            )
        aff_idx = [i for i, f in enumerate(families) if isinstance(f, Affine)]
        if aff_idx:
            self._groups.append(
                (
                    "affine",
                    np.array(aff_idx),
                    (
                        np.array([families[i].a for i in aff_idx]),
                        np.array([families[i].b for i in aff_idx]),
                    ),
                )
            )
        poly_idx = [i for i, f in enumerate(families) if isinstance(f, Polynomial)]
        if poly_idx:
            self._groups.append(("poly", np.array(poly_idx), None))

    def __len__(self):
        return self.n

    def _apply(self, q: np.ndarray, which: str) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if q.shape != (self.n,):
            raise ValueError(f"expected flow vector of length {self.n}, got {q.shape}")
        if np.any(q < 0):
            raise ValueError("latency functions are defined for nonnegative flow only")
        out = np.empty(self.n)
        for kind, idx, params in self._groups:
            x = q[idx]
            if kind == "bpr":
                t_f, cap, alpha, beta = params
                ratio = x / cap
                if which == "eval":
                    out[idx] = t_f * (1.0 + alpha * ratio**beta)
                elif which == "deriv":
                    out[idx] = t_f * alpha * beta * x ** (beta - 1.0) / cap**beta
                elif which == "deriv2":
                    with np.errstate(divide="ignore", invalid="ignore"):
                        val = (
                            t_f * alpha * beta * (beta - 1.0) * x ** (beta - 2.0)
                            / cap**beta
                        )
                    out[idx] = np.where(beta == 1.0, 0.0, val)
                elif which == "integral":
                    out[idx] = t_f * x + t_f * alpha * x ** (beta + 1.0) / (
                        (beta + 1.0) * cap**beta
                    )
            elif kind == "affine":
                a, b = params
                if which == "eval":
                    out[idx] = a * x + b
                elif which == "deriv":
                    out[idx] = a
                elif which == "deriv2":
                    out[idx] = 0.0
                elif which == "integral":
                    out[idx] = 0.5 * a * x * x + b * x
            else:
                for j, i in enumerate(idx):
                    f = self.families[i]
                    out[i] = getattr(f, which)(x[j])
        return out

    def eval(self, q: np.ndarray) -> np.ndarray:
        return self._apply(q, "eval")

    def deriv(self, q: np.ndarray) -> np.ndarray:
        return self._apply(q, "deriv")

    def deriv2(self, q: np.ndarray) -> np.ndarray:
        return self._apply(q, "deriv2")

    def integral(self, q: np.ndarray) -> np.ndarray:
        return self._apply(q, "integral")

    def marginal(self, q: np.ndarray) -> np.ndarray:
        """Marginal social cost l(q) + q * l'(q), the system-optimum edge cost."""
        return self.eval(q) + np.asarray(q, dtype=float) * self.deriv(q)

    def total_latency(self, q: np.ndarray) -> float:
        """Aggregated latency sum_e q_e * l_e(q_e)."""
        return float(np.dot(np.asarray(q, dtype=float), self.eval(q)))

    def potential(self, q: np.ndarray) -> float:
        """Sum of per-edge latency integrals (the user-equilibrium objective)."""
        return float(np.sum(self.integral(q)))


@dataclass(frozen=True)
class RegularityReport:
    """Smoothness constants of a latency set on the bounded domain [0, q_max].

    l0 bounds the first derivative (the latency Lipschitz constant), l1 bounds
    the second derivative, c0 is the largest latency value at q_max.
    """

    l0: float
    l1: float
    c0: float
    strictly_increasing: bool
    convex: bool
    q_max: float


def regularity(families: Sequence[LatencyFamily], q_max: float) -> RegularityReport:
    """Compute smoothness constants for ``families`` on [0, q_max].

    q_max should be an upper bound on any feasible edge flow; total demand is
    the natural choice since no edge can carry more than that.
    """
    if q_max <= 0:
        raise ValueError(f"q_max must be positive, got {q_max}")
    fams = list(families)
    if not fams:
        raise ValueError("need at least one latency family")
    for f in fams:
        if not isinstance(f, _KNOWN_KINDS):
            raise TypeError(f"unsupported latency family: {f!r}")
    l0 = max(f.deriv_sup(q_max) for f in fams)
    l1 = max(f.deriv2_sup(q_max) for f in fams)
    c0 = max(float(f.eval(q_max)) for f in fams)
    increasing = all(f.strictly_increasing for f in fams)
    # all shipped families have nonnegative curvature by construction
    convex = all(float(f.deriv2(q_max)) >= 0 for f in fams)
    return RegularityReport(
        l0=l0,
        l1=l1,
        c0=c0,
        strictly_increasing=increasing,
        convex=convex,
        q_max=q_max,
    )
