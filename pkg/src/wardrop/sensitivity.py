"""Sensitivity analysis of poisoned equilibria and gradient oracles.

The equilibrium response to attack-parameter perturbations is obtained by
implicit differentiation of the KKT system of the users' convex program.  Two
formulations are implemented:

* an edge-flow formulation whose feasible set is written as explicit linear
  inequalities ``A (phi_theta q) <= B (phi_d Q)`` -- the inequality pair
  (A, B) must be supplied, and is generated automatically for parallel-link
  topologies;
* a path-flow formulation over an exact (untruncated) path set, which covers
  general topologies.

On top of the Jacobians sit the analytic attacker gradient, a tangent-space
finite-difference oracle, a one-point smoothed (bandit-feedback) estimator,
and the utility smoothness constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .equilibrium import EquilibriumResult, SolverConfig
from .latency import LatencyBundle, regularity
from .network import Network, PathSet, is_parallel_links
from .poisoning import AttackContext, AttackParams, project_to_C

__all__ = [
    "KKTPoint",
    "SensitivityJacobians",
    "SmoothnessConstants",
    "IFTHypothesisError",
    "ConditioningError",
    "EstimatorError",
    "parallel_link_ab",
    "kkt_point_from_edge_solution",
    "kkt_point_from_path_solution",
    "kkt_residual_edge",
    "ift_jacobian_edge",
    "ift_jacobian_path",
    "attack_gradient",
    "gradient_via_ift",
    "fd_gradient",
    "smoothed_gradient",
    "one_point_estimate",
    "h_sample",
    "smoothness_constants",
    "estimate_sensitivity_constants",
    "tangent_basis",
    "project_tangent",
]

ACTIVE_TOL = 1e-7


class IFTHypothesisError(RuntimeError):
    """The strict-complementarity / nondegeneracy hypothesis fails at the point."""


class ConditioningError(RuntimeError):
    """The implicit-function linear system is singular or inconsistent."""

    def __init__(self, message: str, condition_estimate: float):
        super().__init__(f"{message} (condition estimate {condition_estimate:.3e})")
        self.condition_estimate = condition_estimate


class EstimatorError(RuntimeError):
    """A gradient probe failed or too many samples were dropped."""


@dataclass(frozen=True)
class KKTPoint:
    """Primal flow with multipliers: ``lam`` for inequality rows, ``nu`` for
    equality rows (path formulation only)."""

    primal: np.ndarray
    lam: np.ndarray
    nu: np.ndarray | None = None


@dataclass
class SensitivityJacobians:
    """Equilibrium-flow Jacobians w.r.t. the vectorized attack parameters.

    ``d_primal_*`` rows follow the formulation's primal variable (edge flow or
    path flow); ``d_edge_*`` always map to edge flows, which is what the
    attacker gradient consumes.  Parameter columns are in column-major (vec)
    order.
    """

    d_primal_d_theta: np.ndarray
    d_primal_d_d: np.ndarray
    d_edge_d_theta: np.ndarray
    d_edge_d_d: np.ndarray
    strict_complementarity: bool
    condition_estimate: float
    formulation: str
    active_rows: list[int] | None = None

    def diagnostics(self) -> dict:
        """JSON-serializable summary (condition number, active set, shapes)."""
        return {
            "formulation": self.formulation,
            "strict_complementarity": self.strict_complementarity,
            "condition_estimate": self.condition_estimate,
            "active_rows": self.active_rows,
            "n_primal": int(self.d_primal_d_theta.shape[0]),
            "n_theta_params": int(self.d_primal_d_theta.shape[1]),
            "n_d_params": int(self.d_primal_d_d.shape[1]),
        }


def _require_increasing(bundle: LatencyBundle):
    for f in bundle.families:
        if not f.strictly_increasing:
            raise ValueError(
                "sensitivity analysis needs strictly increasing latencies; "
                f"{f!r} is flow-insensitive"
            )


# -- feasibility inequalities for parallel links --------------------------------


def parallel_link_ab(net: Network) -> tuple[np.ndarray, np.ndarray]:
    """Inequality description of feasible flows on a parallel-link network.

    The demand equality is written as a pair of opposite inequalities and
    nonnegativity as ``-q <= 0``, giving ``A q <= B Q`` row by row.
    """
    if not is_parallel_links(net):
        raise ValueError("automatic A/B construction only covers parallel links")
    n = net.n_edges
    A = np.vstack([np.ones((1, n)), -np.ones((1, n)), -np.eye(n)])
    B = np.vstack([np.ones((1, 1)), -np.ones((1, 1)), np.zeros((n, 1))])
    return A, B


def kkt_residual_edge(
    point: KKTPoint,
    attack: AttackParams,
    net: Network,
    fs,
    Q,
    A: np.ndarray,
    B: np.ndarray,
) -> np.ndarray:
    """Stacked stationarity and complementarity rows of the edge-form KKT map.

    Zero exactly at a KKT point of the poisoned program with feasible set
    ``A (phi_theta q) <= B (phi_d Q)``.
    """
    bundle = fs if isinstance(fs, LatencyBundle) else LatencyBundle(fs)
    Q = np.asarray(Q, dtype=float)
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    phi = attack.phi_theta
    q = np.asarray(point.primal, dtype=float)
    lam = np.asarray(point.lam, dtype=float)
    r = A.shape[0]
    if A.shape[1] != net.n_edges or B.shape[0] != r or B.shape[1] != net.n_od:
        raise ValueError("A/B dimensions do not match the network")
    if lam.shape != (r,):
        raise ValueError(f"expected {r} multipliers, got {lam.shape}")
    transformed = phi @ q
    stationarity = phi.T @ bundle.eval(np.maximum(transformed, 0.0)) + phi.T @ A.T @ lam
    residual = A @ transformed - B @ (attack.phi_d @ Q)
    return np.concatenate([stationarity, lam * residual])


def kkt_point_from_edge_solution(
    result: EquilibriumResult,
    attack: AttackParams,
    net: Network,
    fs,
    Q,
    A: np.ndarray,
    B: np.ndarray,
) -> KKTPoint:
    """Reconstruct inequality multipliers for a converged parallel-link solve.

    The paired demand rows leave one degree of freedom in the multipliers; it
    is fixed by putting weight 1 on the redundant row so both stay strictly
    positive (which strict complementarity needs on active rows).
    """
    bundle = fs if isinstance(fs, LatencyBundle) else LatencyBundle(fs)
    phi = attack.phi_theta
    q = result.flow.q
    n = net.n_edges
    costs = phi.T @ bundle.eval(np.maximum(phi @ q, 0.0))
    transformed = phi @ q
    used = transformed > ACTIVE_TOL
    if not np.any(used):
        raise ValueError("degenerate solution: no transformed flow anywhere")
    # stationarity reads costs - nu * 1 - phi^T s = 0 with s >= 0 supported on
    # the zero-transformed-flow rows; solve for (nu, s) jointly
    inactive = np.flatnonzero(~used)
    M = np.hstack([np.ones((n, 1)), phi.T[:, inactive]])
    sol, _res, _rank, _sv = np.linalg.lstsq(M, costs, rcond=None)
    nu = float(sol[0])
    s = np.zeros(n)
    s[inactive] = np.maximum(sol[1:], 0.0)
    residual = costs - nu - phi.T @ s
    if np.abs(residual).max() > 1e-5 * max(1.0, float(np.abs(costs).max())):
        raise ValueError(
            "cannot reconstruct valid multipliers from this solution "
            f"(stationarity residual {np.abs(residual).max():.3e}); the "
            "equilibrium may be degenerate or solved too loosely"
        )
    r = A.shape[0]
    lam = np.zeros(r)
    lam[0] = max(1.0, 1.0 - nu)
    lam[1] = lam[0] + nu
    lam[2:] = s
    return KKTPoint(primal=q.copy(), lam=lam)


def _scan_strict_complementarity(lam: np.ndarray, residual: np.ndarray) -> None:
    active = np.abs(residual) <= ACTIVE_TOL
    degenerate = active & (lam <= ACTIVE_TOL)
    if np.any(degenerate):
        rows = np.flatnonzero(degenerate).tolist()
        raise IFTHypothesisError(
            f"IFT hypothesis violated: rows {rows} are active with zero multiplier"
        )
    complementarity_broken = ~active & (lam > ACTIVE_TOL)
    if np.any(complementarity_broken):
        rows = np.flatnonzero(complementarity_broken).tolist()
        raise IFTHypothesisError(
            f"not a KKT point: inactive rows {rows} carry positive multipliers"
        )


def _solve_ift(M: np.ndarray, N: np.ndarray):
    """Solve M X = -N by least squares with an explicit consistency check.

    Paired inequality rows make M structurally rank-deficient while the
    primal block of the solution stays unique; least squares recovers it, and
    any genuine singularity shows up as an inconsistent residual.
    """
    X, _res, rank, svals = np.linalg.lstsq(M, -N, rcond=None)
    pos = svals[svals > 0]
    cond = float(pos.max() / pos.min()) if pos.size else math.inf
    residual = np.linalg.norm(M @ X + N)
    scale = max(1.0, float(np.linalg.norm(N)))
    if not np.isfinite(residual) or residual > 1e-7 * scale:
        raise ConditioningError(
            f"implicit-function system inconsistent (residual {residual:.3e})", cond
        )
    return X, cond


def ift_jacobian_edge(
    point: KKTPoint,
    attack: AttackParams,
    net: Network,
    fs,
    Q,
    A: np.ndarray,
    B: np.ndarray,
) -> SensitivityJacobians:
    """Implicit differentiation of the edge-form KKT system.

    Differentiates ``g(q, lam, theta, d) = 0`` at the supplied KKT point and
    solves the block system for the flow response to every entry of the two
    attack operators.
    """
    bundle = fs if isinstance(fs, LatencyBundle) else LatencyBundle(fs)
    _require_increasing(bundle)
    Q = np.asarray(Q, dtype=float)
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    phi = attack.phi_theta
    q = np.asarray(point.primal, dtype=float)
    lam = np.asarray(point.lam, dtype=float)
    n = net.n_edges
    n_od = net.n_od
    r = A.shape[0]

    g = kkt_residual_edge(point, attack, net, bundle, Q, A, B)
    if np.abs(g).max() > 1e-4 * max(1.0, float(np.abs(q).max())):
        raise ValueError(
            f"point is not a KKT point (residual {np.abs(g).max():.3e}); "
            "solve to tighter tolerance first"
        )
    transformed = np.maximum(phi @ q, 0.0)
    residual = A @ (phi @ q) - B @ (attack.phi_d @ Q)
    _scan_strict_complementarity(lam, residual)

    lat = bundle.eval(transformed)
    lat_d = bundle.deriv(transformed)
    H = phi.T @ (lat_d[:, None] * phi)
    M = np.block(
        [
            [H, phi.T @ A.T],
            [lam[:, None] * (A @ phi), np.diag(residual)],
        ]
    )

    u = lat + A.T @ lam  # stationarity is phi^T u
    n_theta = n * n
    n_d = n_od * n_od
    N = np.zeros((n + r, n_theta + n_d))
    Aphi_q_scale = lam[:, None] * A  # reused: d(comp)/d theta_ij = q_j lam*A[:,i]
    for j in range(n):
        for i in range(n):
            col = i + j * n
            stat = q[j] * lat_d[i] * phi[i, :]
            stat[j] += u[i]
            N[:n, col] = stat
            N[n:, col] = q[j] * Aphi_q_scale[:, i]
    for l_ in range(n_od):
        for k in range(n_od):
            col = n_theta + k + l_ * n_od
            N[n:, col] = -Q[l_] * lam * B[:, k]

    X, cond = _solve_ift(M, N)
    d_theta = X[:n, :n_theta]
    d_d = X[:n, n_theta:]
    return SensitivityJacobians(
        d_primal_d_theta=d_theta,
        d_primal_d_d=d_d,
        d_edge_d_theta=d_theta,
        d_edge_d_d=d_d,
        strict_complementarity=True,
        condition_estimate=cond,
        formulation="edge",
        active_rows=np.flatnonzero(np.abs(residual) <= ACTIVE_TOL).tolist(),
    )


# -- path formulation ------------------------------------------------------------


def _path_costs(bundle, phi, paths: PathSet, mu):
    flow = paths.delta @ mu
    transformed = np.maximum(phi @ flow, 0.0)
    lat = bundle.eval(transformed)
    return (phi @ paths.delta).T @ lat, transformed


def kkt_point_from_path_solution(
    result: EquilibriumResult,
    attack: AttackParams,
    net: Network,
    paths: PathSet,
    fs,
    Q,
) -> KKTPoint:
    """Map a converged solve onto the path set and reconstruct multipliers."""
    if paths.truncated:
        raise ValueError("path set is truncated; the KKT system needs the full set")
    bundle = fs if isinstance(fs, LatencyBundle) else LatencyBundle(fs)
    flow = result.recover_paths()
    index = {(w, p): j for j, (p, w) in enumerate(zip(paths.paths, paths.od_of_path))}
    mu = np.zeros(paths.n_paths)
    for mu_p, w, p in zip(flow.mu, flow.od_of_path, flow.paths):
        key = (w, p)
        if key not in index:
            raise ValueError(f"solver path {p} for OD {w} missing from the path set")
        mu[index[key]] += mu_p
    costs, _ = _path_costs(bundle, attack.phi_theta, paths, mu)
    nu = np.zeros(net.n_od)
    lam = np.zeros(paths.n_paths)
    for w in range(net.n_od):
        members = paths.paths_for(w)
        nu[w] = -min(costs[j] for j in members)
        for j in members:
            lam[j] = 0.0 if mu[j] > ACTIVE_TOL else max(0.0, costs[j] + nu[w])
    return KKTPoint(primal=mu, lam=lam, nu=nu)


def ift_jacobian_path(
    point: KKTPoint,
    attack: AttackParams,
    net: Network,
    paths: PathSet,
    fs,
    Q,
) -> SensitivityJacobians:
    """Implicit differentiation of the path-form KKT system.

    Needs an exact path set; the nonnegativity rows must satisfy strict
    complementarity (every path has either positive flow or a positive
    multiplier).  Edge-flow Jacobians are the path Jacobians pushed through
    the path-edge incidence.
    """
    if paths.truncated:
        raise ValueError("path set is truncated; refusing implicit differentiation")
    bundle = fs if isinstance(fs, LatencyBundle) else LatencyBundle(fs)
    _require_increasing(bundle)
    Q = np.asarray(Q, dtype=float)
    phi = attack.phi_theta
    mu = np.asarray(point.primal, dtype=float)
    lam = np.asarray(point.lam, dtype=float)
    if point.nu is None:
        raise ValueError("path-form KKT point needs equality multipliers")
    nu = np.asarray(point.nu, dtype=float)
    n_p = paths.n_paths
    n = net.n_edges
    n_od = net.n_od

    degenerate = (mu <= ACTIVE_TOL) & (lam <= ACTIVE_TOL)
    if np.any(degenerate):
        rows = np.flatnonzero(degenerate).tolist()
        raise IFTHypothesisError(
            f"IFT hypothesis violated: paths {rows} have zero flow and zero multiplier"
        )

    comp = phi @ paths.delta  # |E| x |P|, maps path flow to poisoned edge flow
    edge_flow = paths.delta @ mu
    transformed = np.maximum(phi @ edge_flow, 0.0)
    lat = bundle.eval(transformed)
    lat_d = bundle.deriv(transformed)
    H = comp.T @ (lat_d[:, None] * comp)

    stationarity = comp.T @ lat - lam + paths.lambda_.T @ nu
    if np.abs(stationarity).max() > 1e-4 * max(1.0, float(np.abs(lat).max())):
        raise ValueError(
            f"point is not a KKT point (stationarity residual "
            f"{np.abs(stationarity).max():.3e})"
        )

    M = np.block(
        [
            [H, -np.eye(n_p), paths.lambda_.T],
            [-np.diag(lam), -np.diag(mu), np.zeros((n_p, n_od))],
            [paths.lambda_, np.zeros((n_od, n_p)), np.zeros((n_od, n_od))],
        ]
    )

    n_theta = n * n
    n_d = n_od * n_od
    N = np.zeros((2 * n_p + n_od, n_theta + n_d))
    for j in range(n):
        for i in range(n):
            col = i + j * n
            # d stationarity / d theta_ij
            N[:n_p, col] = lat[i] * paths.delta[j, :] + edge_flow[j] * lat_d[i] * comp[i, :]
    for l_ in range(n_od):
        for k in range(n_od):
            col = n_theta + k + l_ * n_od
            N[2 * n_p + k, col] = -Q[l_]

    X, cond = _solve_ift(M, N)
    d_mu_theta = X[:n_p, :n_theta]
    d_mu_d = X[:n_p, n_theta:]
    return SensitivityJacobians(
        d_primal_d_theta=d_mu_theta,
        d_primal_d_d=d_mu_d,
        d_edge_d_theta=paths.delta @ d_mu_theta,
        d_edge_d_d=paths.delta @ d_mu_d,
        strict_complementarity=True,
        condition_estimate=cond,
        formulation="path",
        active_rows=np.flatnonzero(mu <= ACTIVE_TOL).tolist(),
    )


# -- attacker gradient -------------------------------------------------------------


def attack_gradient(
    attack: AttackParams,
    pwe: EquilibriumResult,
    jac: SensitivityJacobians,
    fs,
    s_star: float,
    gamma: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic utility gradient: quadratic cost part plus the equilibrium
    response of the disruption ratio through the flow Jacobians.

    Returned in matrix shape; entries follow the same column-major vec order
    as the Jacobian columns.
    """
    if s_star <= 0:
        raise ValueError("s_star must be positive")
    if not np.all(np.isfinite(jac.d_edge_d_theta)) or not np.all(
        np.isfinite(jac.d_edge_d_d)
    ):
        raise ValueError("Jacobians contain non-finite entries")
    bundle = fs if isinstance(fs, LatencyBundle) else LatencyBundle(fs)
    n, n_od = attack.n_edges, attack.n_od
    q = pwe.flow.q
    weight = q * bundle.deriv(q) + bundle.eval(q)
    gt = attack.theta() - np.eye(n).flatten(order="F")
    gt = gt - (gamma / s_star) * (jac.d_edge_d_theta.T @ weight)
    gd = attack.d() - np.eye(n_od).flatten(order="F")
    gd = gd - (gamma / s_star) * (jac.d_edge_d_d.T @ weight)
    return gt.reshape(n, n, order="F"), gd.reshape(n_od, n_od, order="F")


def gradient_via_ift(
    attack: AttackParams, pwe: EquilibriumResult, context: AttackContext
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic attack gradient through whichever implicit-differentiation
    formulation the context supports.

    Preference order: an exact path set, explicit (A, B) inequalities, then
    the automatic parallel-link construction.  Raises when none applies.
    """
    net = context.net
    if context.paths is not None:
        paths = context.paths
        point = kkt_point_from_path_solution(
            pwe, attack, net, paths, context.bundle, context.demand
        )
        jac = ift_jacobian_path(point, attack, net, paths, context.bundle, context.demand)
    else:
        if context.ab is not None:
            A, B = context.ab
        elif is_parallel_links(net):
            A, B = parallel_link_ab(net)
        else:
            raise ValueError(
                "no sensitivity support for this topology: supply an exact "
                "path set or explicit (A, B) inequalities"
            )
        point = kkt_point_from_edge_solution(
            pwe, attack, net, context.bundle, context.demand, A, B
        )
        jac = ift_jacobian_edge(point, attack, net, context.bundle, context.demand, A, B)
    return attack_gradient(attack, pwe, jac, context.bundle, context.s_star, context.gamma)


# -- tangent space helpers ----------------------------------------------------------


def tangent_basis(n: int) -> np.ndarray:
    """Orthonormal basis of the zero-sum subspace of R^n ((n-1) x n rows)."""
    rows = []
    for k in range(1, n):
        v = np.zeros(n)
        v[:k] = 1.0
        v[k] = -float(k)
        rows.append(v / math.sqrt(k * (k + 1.0)))
    return np.array(rows) if rows else np.zeros((0, n))


def project_tangent(mat: np.ndarray) -> np.ndarray:
    """Project each column onto the zero-sum subspace (remove column means)."""
    mat = np.asarray(mat, dtype=float)
    return mat - mat.mean(axis=0, keepdims=True)


def fd_gradient(
    attack: AttackParams,
    context: AttackContext,
    step: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference utility gradient along feasibility-preserving
    directions.

    Perturbations live in the tangent space of the column-sum constraints (no
    projection inside the probes), so every probe keeps columns summing to
    one; each probe re-solves the poisoned equilibrium to a 1e-8 relative gap.
    Probes may dip infinitesimally outside the nonnegative cone when the
    attack sits on its boundary (the identity does); the solution map extends
    smoothly there.  The result is the tangent-space projection of the
    utility gradient, embedded in matrix shape.
    """
    n, n_od = attack.n_edges, attack.n_od
    h = step if step is not None else 1e-5 * max(1.0, float(np.abs(attack.theta()).max()))
    cfg = context.solver_for_gap(1e-8)
    base = context.solve(attack, cfg)
    if not base.converged:
        raise EstimatorError("base equilibrium did not converge to 1e-8")

    def probe(phi_theta, phi_d, name):
        ev = context.evaluate_raw(phi_theta, phi_d, cfg, warm=base)
        if not ev.valid:
            raise EstimatorError(f"equilibrium solve failed at probe {name}")
        return ev.utility

    grad_theta = np.zeros((n, n))
    basis = tangent_basis(n)
    for j in range(n):
        for k, v in enumerate(basis):
            U = np.zeros((n, n))
            U[:, j] = v
            up = probe(attack.phi_theta + h * U, attack.phi_d, f"theta[{j}]+{k}")
            dn = probe(attack.phi_theta - h * U, attack.phi_d, f"theta[{j}]-{k}")
            grad_theta += ((up - dn) / (2.0 * h)) * U
    grad_d = np.zeros((n_od, n_od))
    basis_d = tangent_basis(n_od)
    for j in range(n_od):
        for k, v in enumerate(basis_d):
            U = np.zeros((n_od, n_od))
            U[:, j] = v
            up = probe(attack.phi_theta, attack.phi_d + h * U, f"d[{j}]+{k}")
            dn = probe(attack.phi_theta, attack.phi_d - h * U, f"d[{j}]-{k}")
            grad_d += ((up - dn) / (2.0 * h)) * U
    return grad_theta, grad_d


# -- one-point smoothed estimator ------------------------------------------------------


def one_point_estimate(
    values: np.ndarray, directions: np.ndarray, dim: int, r: float, mode: str
) -> np.ndarray:
    """Assemble the one-point gradient estimate from utility samples.

    ``values[i]`` is the utility at the point perturbed by ``directions[i]``
    (a vector of norm r in sphere mode, a N(0, r^2 I) draw in gaussian mode).
    """
    values = np.asarray(values, dtype=float)
    directions = np.asarray(directions, dtype=float)
    m = len(values)
    if m == 0:
        raise EstimatorError("no samples to average")
    if mode == "sphere":
        scale = dim / (m * r * r)
    elif mode == "gaussian":
        scale = 1.0 / (m * r * r)
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return scale * (values @ directions)


def h_sample(dim: int, inv_eps: float, value_bound: float = 1.0, r: float = 1.0) -> int:
    """Sample count sufficient for the one-point estimator to reach accuracy
    1/inv_eps with high probability, for utilities bounded by ``value_bound``
    on the sampling sphere of radius r.  Polynomial in the dimension and the
    inverse accuracy."""
    if dim < 1 or inv_eps <= 0 or value_bound <= 0 or r <= 0:
        raise ValueError("h_sample arguments must be positive")
    return int(math.ceil(10.0 * dim * dim * (value_bound * inv_eps / r) ** 2))


def smoothed_gradient(
    attack: AttackParams,
    context: AttackContext | None,
    m: int,
    r: float,
    rng: np.random.Generator | int,
    sampling: str = "sphere",
    utility=None,
    solver_cfg: SolverConfig | None = None,
    warm: EquilibriumResult | None = None,
):
    """One-point smoothed gradient estimates from bandit feedback.

    Draws m perturbations for each operator (asynchronously: flow-operator
    samples hold the demand operator fixed and vice versa), projects every
    perturbed parameter onto the feasible set, evaluates the utility there
    (one full equilibrium solve per sample), and averages.  All randomness is
    drawn up front from one seeded stream.

    Returns (grad_theta_estimate, grad_d_estimate, diagnostics).
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    if r <= 0:
        raise ValueError("r must be positive")
    if sampling not in ("sphere", "gaussian"):
        raise ValueError(f"unknown sampling mode {sampling!r}")
    rng = np.random.default_rng(rng) if isinstance(rng, (int, np.integer)) else rng
    if utility is None:
        if context is None:
            raise ValueError("need a context when no utility override is given")

        def utility(a: AttackParams) -> float:
            ev = context.evaluate(a, solver_cfg, warm=warm)
            if not ev.valid:
                raise EstimatorError("equilibrium solve failed")
            return ev.utility

    n, n_od = attack.n_edges, attack.n_od
    dim_theta, dim_d = n * n, n_od * n_od

    def draw(dim):
        g = rng.standard_normal((m, dim))
        if sampling == "sphere":
            norms = np.linalg.norm(g, axis=1, keepdims=True)
            norms[norms == 0.0] = 1.0
            return r * g / norms
        return r * g

    us = draw(dim_theta)
    vs = draw(dim_d)

    theta_vals, theta_dirs, drops = [], [], 0
    for i in range(m):
        U = us[i].reshape(n, n, order="F")
        candidate = project_to_C(attack.phi_theta + U, attack.phi_d)
        try:
            theta_vals.append(utility(candidate))
            theta_dirs.append(us[i])
        except EstimatorError:
            drops += 1
    d_vals, d_dirs = [], []
    for i in range(m):
        V = vs[i].reshape(n_od, n_od, order="F")
        candidate = project_to_C(attack.phi_theta, attack.phi_d + V)
        try:
            d_vals.append(utility(candidate))
            d_dirs.append(vs[i])
        except EstimatorError:
            drops += 1
    if drops > 0.2 * 2 * m:
        raise EstimatorError(f"{drops} of {2 * m} probes failed (> 20%)")

    est_theta = one_point_estimate(theta_vals, np.array(theta_dirs), dim_theta, r, sampling)
    est_d = one_point_estimate(d_vals, np.array(d_dirs), dim_d, r, sampling)

    def spread(vals, dirs, dim):
        if len(vals) < 2:
            return 0.0
        per = (dim / (r * r)) * np.asarray(vals)[:, None] * np.asarray(dirs)
        return float(np.mean(np.sum((per - per.mean(axis=0)) ** 2, axis=1)))

    diagnostics = {
        "m": m,
        "m_used_theta": len(theta_vals),
        "m_used_d": len(d_vals),
        "drops": drops,
        "r": r,
        "sampling": sampling,
        "variance_theta": spread(theta_vals, theta_dirs, dim_theta),
        "variance_d": spread(d_vals, d_dirs, dim_d),
    }
    return (
        est_theta.reshape(n, n, order="F"),
        est_d.reshape(n_od, n_od, order="F"),
        diagnostics,
    )


# -- smoothness constants ----------------------------------------------------------


@dataclass(frozen=True)
class SmoothnessConstants:
    """Lipschitz bounds of the attacker utility and its gradient, with the
    ingredients they were computed from."""

    L0: float
    L1: float
    l_q: float
    C0: float
    C1: float
    c0: float
    l0: float
    l1: float
    D_total: float
    n_edges: int
    gamma: float
    s_star: float


def smoothness_constants(
    net: Network,
    fs,
    Q,
    gamma: float,
    s_star: float,
    lq_estimate: float | None,
    C0: float | None,
    C1: float | None,
) -> SmoothnessConstants:
    """Utility Lipschitz bound and gradient Lipschitz bound on the bounded
    feasible domain (total demand caps every edge flow).

    The equilibrium-map constants have no closed form; they must be supplied
    (typically empirical estimates from ``estimate_sensitivity_constants``).
    """
    missing = [
        name
        for name, val in [("lq_estimate", lq_estimate), ("C0", C0), ("C1", C1)]
        if val is None
    ]
    if missing:
        raise ValueError(f"missing constants: {', '.join(missing)}")
    if s_star <= 0:
        raise ValueError("s_star must be positive")
    Q = np.asarray(Q, dtype=float)
    D = float(Q.sum())
    bundle = fs if isinstance(fs, LatencyBundle) else LatencyBundle(fs)
    rep = regularity(bundle.families, D)
    sqrt_e = math.sqrt(net.n_edges)
    L0 = (math.sqrt(2.0) + gamma * (rep.c0 + rep.l0 * D) * lq_estimate / s_star) * sqrt_e
    lprime_at_d = max(float(f.deriv(D)) for f in bundle.families)
    L1 = 1.0 + (gamma / s_star) * (
        C0 * lq_estimate * (rep.l0 + lprime_at_d)
        + C1 * rep.c0
        + D * sqrt_e * (C0 * rep.l1 * lq_estimate + C1 * lprime_at_d)
    ) * sqrt_e
    return SmoothnessConstants(
        L0=L0,
        L1=L1,
        l_q=float(lq_estimate),
        C0=float(C0),
        C1=float(C1),
        c0=rep.c0,
        l0=rep.l0,
        l1=rep.l1,
        D_total=D,
        n_edges=net.n_edges,
        gamma=gamma,
        s_star=s_star,
    )


def estimate_sensitivity_constants(
    context: AttackContext,
    n_samples: int = 30,
    delta: float = 1e-3,
    rng: np.random.Generator | int = 0,
    percentile: float = 99.0,
    base: AttackParams | None = None,
):
    """Empirical difference-quotient estimates of the equilibrium-map
    constants (l_q, C0, C1), reported at the given percentile.

    These are estimates, not certified bounds: first-order quotients estimate
    the flow-map Lipschitz constant (and the Jacobian norm), second-order
    quotients its Lipschitz modulus.
    """
    rng = np.random.default_rng(rng) if isinstance(rng, (int, np.integer)) else rng
    attack = base if base is not None else context.identity()
    n, n_od = attack.n_edges, attack.n_od
    q0_res = context.solve(attack)
    q0 = q0_res.flow.q
    z0 = np.concatenate([attack.theta(), attack.d()])
    first, second = [], []
    for _ in range(n_samples):
        U = project_tangent(rng.standard_normal((n, n)))
        V = project_tangent(rng.standard_normal((n_od, n_od)))
        norm = math.sqrt(np.sum(U * U) + np.sum(V * V))
        if norm == 0.0:
            continue
        U /= norm
        V /= norm
        # probes are projected back onto the feasible set (the base point may
        # sit on its boundary); quotients use the realized displacements
        a1 = project_to_C(attack.phi_theta + delta * U, attack.phi_d + delta * V)
        a2 = project_to_C(
            attack.phi_theta + 2 * delta * U, attack.phi_d + 2 * delta * V
        )
        z1 = np.concatenate([a1.theta(), a1.d()])
        z2 = np.concatenate([a2.theta(), a2.d()])
        d01 = float(np.linalg.norm(z1 - z0))
        d12 = float(np.linalg.norm(z2 - z1))
        if d01 < 1e-12 or d12 < 1e-12:
            continue
        q1 = context.solve(a1, warm=q0_res).flow.q
        q2 = context.solve(a2, warm=q0_res).flow.q
        first.append(float(np.linalg.norm(q1 - q0)) / d01)
        first.append(float(np.linalg.norm(q2 - q1)) / d12)
        g01 = (q1 - q0) / d01
        g12 = (q2 - q1) / d12
        second.append(float(np.linalg.norm(g12 - g01)) / (0.5 * (d01 + d12)))
    if not first:
        raise EstimatorError("all probe draws collapsed under projection")
    l_q = float(np.percentile(first, percentile))
    c1 = float(np.percentile(second, percentile)) if second else 0.0
    return l_q, l_q, c1
