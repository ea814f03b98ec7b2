"""Attack parameterization and the attacker's objective.

The attacker holds a pair of column-stochastic operators: one redistributes
edge flow before it enters the latency functions, the other redistributes
demand between OD pairs.  Column-stochasticity preserves the 1-norm of
nonnegative vectors, so poisoned flows and demands pass a total-mass check.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .equilibrium import (
    EquilibriumResult,
    SolverConfig,
    check_column_stochastic,
    solve_pwe,
    solve_so,
    solve_we,
)
from .latency import LatencyBundle
from .network import Network

__all__ = [
    "AttackParams",
    "AttackEval",
    "AttackContext",
    "identity_attack",
    "project_to_C",
    "project_columns_to_simplex",
    "ppoa",
    "attack_utility",
]


@dataclass(frozen=True)
class AttackParams:
    """Column-stochastic flow and demand poisoning operators."""

    phi_theta: np.ndarray
    phi_d: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "phi_theta", check_column_stochastic(self.phi_theta, "phi_theta")
        )
        object.__setattr__(self, "phi_d", check_column_stochastic(self.phi_d, "phi_d"))

    @property
    def n_edges(self) -> int:
        return self.phi_theta.shape[0]

    @property
    def n_od(self) -> int:
        return self.phi_d.shape[0]

    def theta(self) -> np.ndarray:
        """Flow operator flattened column-by-column (the attack vector)."""
        return self.phi_theta.flatten(order="F")

    def d(self) -> np.ndarray:
        return self.phi_d.flatten(order="F")

    def distance_from_identity(self) -> float:
        n, w = self.n_edges, self.n_od
        return float(
            np.linalg.norm(self.phi_theta - np.eye(n)) ** 2
            + np.linalg.norm(self.phi_d - np.eye(w)) ** 2
        ) ** 0.5

    def to_json(self) -> str:
        return json.dumps(
            {
                "phi_theta": self.phi_theta.tolist(),
                "phi_d": self.phi_d.tolist(),
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "AttackParams":
        payload = json.loads(text)
        return cls(np.array(payload["phi_theta"]), np.array(payload["phi_d"]))


def identity_attack(n_edges: int, n_od: int) -> AttackParams:
    """The no-attack reference point: both operators are identities."""
    if n_edges < 1 or n_od < 1:
        raise ValueError("operator sizes must be at least 1")
    return AttackParams(np.eye(n_edges), np.eye(n_od))


def _simplex_project_columns(mat: np.ndarray) -> np.ndarray:
    """Euclidean projection of every column onto the probability simplex.

    Sort-based threshold rule: with the column sorted in decreasing order,
    find the largest k with u_k + (1 - sum_{i<=k} u_i)/k > 0 and shift by the
    corresponding threshold, clipping at zero.
    """
    mat = np.asarray(mat, dtype=float)
    n = mat.shape[0]
    u = -np.sort(-mat, axis=0)
    css = np.cumsum(u, axis=0)
    ks = np.arange(1, n + 1).reshape(-1, 1)
    cond = u + (1.0 - css) / ks > 0.0
    k_star = n - 1 - np.argmax(cond[::-1], axis=0)
    tau = (1.0 - css[k_star, np.arange(mat.shape[1])]) / (k_star + 1.0)
    return np.maximum(mat + tau, 0.0)


def project_columns_to_simplex(mat: np.ndarray) -> np.ndarray:
    return _simplex_project_columns(mat)


def project_to_C(theta: np.ndarray, d: np.ndarray) -> AttackParams:
    """Euclidean projection of an operator pair onto the feasible set.

    The Frobenius objective separates over columns, so the projection is the
    column-wise simplex projection of each matrix.  Idempotent.
    """
    theta = np.asarray(theta, dtype=float)
    d = np.asarray(d, dtype=float)
    if theta.ndim != 2 or theta.shape[0] != theta.shape[1]:
        raise ValueError(f"theta must be square, got shape {theta.shape}")
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError(f"d must be square, got shape {d.shape}")
    return AttackParams(_simplex_project_columns(theta), _simplex_project_columns(d))


def ppoa(q_pwe: np.ndarray, fs, s_star: float) -> float:
    """Aggregated latency of a flow under TRUE latencies, relative to the
    unpoisoned system optimum."""
    if s_star <= 0:
        raise ValueError(f"s_star must be positive, got {s_star}")
    bundle = fs if isinstance(fs, LatencyBundle) else LatencyBundle(fs)
    return bundle.total_latency(np.asarray(q_pwe, dtype=float)) / s_star


@dataclass(frozen=True)
class AttackEval:
    """Attacker utility split into its cost and disruption components."""

    utility: float
    cost_term: float
    ppoa: float
    s_poisoned: float
    s_star: float
    gamma: float
    valid: bool = True


def attack_utility(
    attack: AttackParams,
    pwe: EquilibriumResult,
    s_star: float,
    gamma: float,
) -> AttackEval:
    """Utility = 0.5 * squared Frobenius distance from identity - gamma * PPoA.

    An unconverged equilibrium result is not an error; the evaluation carries
    ``valid=False`` so learning loops can decide what to do with it.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be nonnegative, got {gamma}")
    if s_star <= 0:
        raise ValueError(f"s_star must be positive, got {s_star}")
    n, w = attack.n_edges, attack.n_od
    cost_term = 0.5 * (
        float(np.linalg.norm(attack.phi_theta - np.eye(n)) ** 2)
        + float(np.linalg.norm(attack.phi_d - np.eye(w)) ** 2)
    )
    s_poisoned = pwe.aggregated_latency
    ratio = s_poisoned / s_star
    return AttackEval(
        utility=cost_term - gamma * ratio,
        cost_term=cost_term,
        ppoa=ratio,
        s_poisoned=s_poisoned,
        s_star=s_star,
        gamma=gamma,
        valid=bool(pwe.converged),
    )


@dataclass(frozen=True)
class _RawOperators:
    phi_theta: np.ndarray
    phi_d: np.ndarray


@dataclass
class AttackContext:
    """Everything the attacker's problem needs: the network, true latencies,
    base demand, the disruption weight, and the unpoisoned baselines.

    ``paths`` (an exact path set) or ``ab`` (explicit feasibility
    inequalities) unlock implicit-differentiation gradients on topologies
    that support them.
    """

    net: Network
    bundle: LatencyBundle
    demand: np.ndarray
    gamma: float
    solver: SolverConfig
    so_result: EquilibriumResult
    we_result: EquilibriumResult
    paths: object | None = None
    ab: tuple[np.ndarray, np.ndarray] | None = None

    @classmethod
    def build(
        cls,
        net: Network,
        fs=None,
        Q=None,
        gamma: float = 1.0,
        solver: SolverConfig | None = None,
        paths=None,
        ab=None,
    ) -> "AttackContext":
        bundle = fs if isinstance(fs, LatencyBundle) else LatencyBundle(fs or net.latencies())
        solver = solver or SolverConfig()
        demand = np.asarray(net.demand if Q is None else Q, dtype=float)
        so = solve_so(net, bundle, demand, solver)
        we = solve_we(net, bundle, demand, solver)
        return cls(net, bundle, demand, gamma, solver, so, we, paths, ab)

    @property
    def s_star(self) -> float:
        return self.so_result.aggregated_latency

    @property
    def poa(self) -> float:
        return self.we_result.aggregated_latency / self.s_star

    def solve(self, attack: AttackParams, cfg: SolverConfig | None = None,
              warm: EquilibriumResult | None = None) -> EquilibriumResult:
        return solve_pwe(self.net, self.bundle, self.demand, attack,
                         cfg or self.solver, warm=warm)

    def evaluate(self, attack: AttackParams, cfg: SolverConfig | None = None,
                 warm: EquilibriumResult | None = None) -> AttackEval:
        pwe = self.solve(attack, cfg, warm=warm)
        return attack_utility(attack, pwe, self.s_star, self.gamma)

    def evaluate_raw(self, phi_theta: np.ndarray, phi_d: np.ndarray,
                     cfg: SolverConfig | None = None,
                     warm: EquilibriumResult | None = None) -> AttackEval:
        """Utility at an operator pair that may sit just outside the feasible
        set (derivative probes at its boundary); skips validation."""
        carrier = _RawOperators(phi_theta, phi_d)
        pwe = solve_pwe(self.net, self.bundle, self.demand, carrier,
                        cfg or self.solver, warm=warm, validate=False)
        n, w = self.net.n_edges, self.net.n_od
        cost_term = 0.5 * (
            float(np.linalg.norm(phi_theta - np.eye(n)) ** 2)
            + float(np.linalg.norm(phi_d - np.eye(w)) ** 2)
        )
        ratio = pwe.aggregated_latency / self.s_star
        return AttackEval(
            utility=cost_term - self.gamma * ratio,
            cost_term=cost_term,
            ppoa=ratio,
            s_poisoned=pwe.aggregated_latency,
            s_star=self.s_star,
            gamma=self.gamma,
            valid=bool(pwe.converged),
        )

    def solver_for_gap(self, rel_gap_tol: float) -> SolverConfig:
        """Solver configuration pinned to the given relative gap, with enough
        iteration and line-search headroom to actually reach it."""
        return replace(
            self.solver,
            rel_gap_tol=rel_gap_tol,
            max_iters=max(self.solver.max_iters, 20000),
            line_search_tol=min(self.solver.line_search_tol, 1e-3 * rel_gap_tol),
        )

    def identity(self) -> AttackParams:
        return identity_attack(self.net.n_edges, self.net.n_od)
