"""Two-timescale Stackelberg learning loops for the attacker.

Each outer iteration lets the followers form the poisoned equilibrium
exactly (one converged solve), then takes a projected gradient step on the
attack parameters; the learning rate is annealed geometrically.  The
first-order loop consumes analytic implicit-differentiation gradients (or a
finite-difference oracle), the zeroth-order loop only the aggregated-latency
feedback of perturbed attacks through the one-point smoothed estimator.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .equilibrium import SolverConfig
from .poisoning import AttackContext, AttackParams, attack_utility, project_to_C
from .sensitivity import (
    EstimatorError,
    IFTHypothesisError,
    fd_gradient,
    gradient_via_ift,
    smoothed_gradient,
    tangent_basis,
)

__all__ = [
    "LearnerConfig",
    "TraceRow",
    "LearningTrace",
    "LearningAborted",
    "run_first_order",
    "run_zeroth_order",
    "projected_gradient_norm",
    "check_dse",
    "DSEReport",
]

TRACE_COLUMNS = [
    "iteration",
    "utility",
    "ppoa",
    "cost_term",
    "grad_norm",
    "proj_grad_norm",
    "eta",
    "pwe_iters",
    "pwe_rel_gap",
    "pwe_converged",
]


@dataclass(frozen=True)
class LearnerConfig:
    """Hyperparameters of the attacker's learning process.

    ``eta0``, ``gamma`` and ``m`` default to the square-root-of-edge-count
    scalings (0.1/sqrt(|E|), sqrt(|E|), round(sqrt(|E|))) when left None.
    One outer iteration plays one attack round ("day").
    """

    eta0: float | None = None
    anneal: float = 0.95
    gamma: float | None = None
    m: int | None = None
    r: float = 0.05
    outer_iters: int = 30
    solver: SolverConfig = field(default_factory=SolverConfig)
    rng_seed: int = 0
    sampling_mode: str = "sphere"  # "sphere" | "gaussian"
    gradient_mode: str = "zeroth-order"  # "ift" | "finite-difference" | "zeroth-order"
    stationarity_tol: float = 1e-4
    fd_fallback: bool = False
    warm_probes: bool = True

    def __post_init__(self):
        if self.eta0 is not None and self.eta0 <= 0:
            raise ValueError("eta0 must be positive")
        if not (0.0 < self.anneal <= 1.0):
            raise ValueError("anneal must be in (0, 1]")
        if self.m is not None and self.m < 1:
            raise ValueError("m must be at least 1")
        if self.r <= 0:
            raise ValueError("r must be positive")
        if self.outer_iters < 1:
            raise ValueError("outer_iters must be at least 1")
        if self.sampling_mode not in ("sphere", "gaussian"):
            raise ValueError(f"unknown sampling mode {self.sampling_mode!r}")
        if self.gradient_mode not in ("ift", "finite-difference", "zeroth-order"):
            raise ValueError(f"unknown gradient mode {self.gradient_mode!r}")

    def resolve(self, n_edges: int) -> "LearnerConfig":
        sqrt_e = math.sqrt(n_edges)
        return replace(
            self,
            eta0=self.eta0 if self.eta0 is not None else 0.1 / sqrt_e,
            gamma=self.gamma if self.gamma is not None else sqrt_e,
            m=self.m if self.m is not None else max(1, round(sqrt_e)),
        )


@dataclass
class TraceRow:
    iteration: int
    utility: float
    ppoa: float
    cost_term: float
    grad_norm: float
    proj_grad_norm: float | None
    eta: float
    pwe_iters: int
    pwe_rel_gap: float
    pwe_converged: bool
    wall_time: float
    checkpoint: str | None = None  # path of the attack snapshot, when saved

    def csv_values(self) -> list[str]:
        proj = "" if self.proj_grad_norm is None else repr(self.proj_grad_norm)
        return [
            str(self.iteration),
            repr(self.utility),
            repr(self.ppoa),
            repr(self.cost_term),
            repr(self.grad_norm),
            proj,
            repr(self.eta),
            str(self.pwe_iters),
            repr(self.pwe_rel_gap),
            str(int(self.pwe_converged)),
        ]


@dataclass
class LearningTrace:
    rows: list[TraceRow] = field(default_factory=list)
    halted_by: str = "iteration-budget"

    def __len__(self):
        return len(self.rows)

    def csv_lines(self) -> list[str]:
        # wall time stays out of the CSV so fixed seeds give identical bytes
        lines = [",".join(TRACE_COLUMNS)]
        lines += [",".join(row.csv_values()) for row in self.rows]
        return lines

    def final_ppoa(self) -> float:
        if not self.rows:
            raise ValueError("empty trace")
        return self.rows[-1].ppoa


class LearningAborted(RuntimeError):
    """Raised when probe failures exceed the tolerated fraction; carries the
    partial trace so callers can keep it."""

    def __init__(self, message: str, attack: AttackParams, trace: LearningTrace):
        super().__init__(message)
        self.attack = attack
        self.trace = trace


def projected_gradient_norm(
    attack: AttackParams,
    grad_theta: np.ndarray,
    grad_d: np.ndarray,
    eta: float = 1.0,
) -> float:
    """Norm of the projected-gradient residual (z - Proj(z - eta*grad))/eta,
    the stationarity measure appropriate on a constrained set."""
    stepped = project_to_C(
        attack.phi_theta - eta * grad_theta, attack.phi_d - eta * grad_d
    )
    dt = (attack.phi_theta - stepped.phi_theta) / eta
    dd = (attack.phi_d - stepped.phi_d) / eta
    return math.sqrt(float(np.sum(dt * dt)) + float(np.sum(dd * dd)))


def _context_with_gamma(context: AttackContext, gamma: float | None) -> AttackContext:
    if gamma is None or gamma == context.gamma:
        return context
    return replace(context, gamma=gamma)


def _save_checkpoint(attack: AttackParams, checkpoint_dir, iteration: int) -> str | None:
    if checkpoint_dir is None:
        return None
    from pathlib import Path

    target = Path(checkpoint_dir)
    target.mkdir(parents=True, exist_ok=True)
    path = target / f"attack_iter_{iteration:04d}.json"
    path.write_text(attack.to_json() + "\n")
    return str(path)


def _first_order_gradient(attack, pwe, context, cfg):
    if cfg.gradient_mode == "finite-difference":
        return fd_gradient(attack, context)
    try:
        return gradient_via_ift(attack, pwe, context)
    except (IFTHypothesisError, ValueError):
        if cfg.fd_fallback:
            return fd_gradient(attack, context)
        raise


def run_first_order(
    context: AttackContext,
    cfg: LearnerConfig,
    start: AttackParams | None = None,
    checkpoint_dir=None,
) -> tuple[AttackParams, LearningTrace]:
    """Projected gradient ascent on disruption with first-order information.

    Every outer iteration solves the poisoned equilibrium to tolerance,
    assembles the analytic utility gradient (implicit differentiation, or
    finite differences per ``gradient_mode``; degenerate sensitivity falls
    back to finite differences only when ``fd_fallback`` opts in), then steps
    and projects.  Halts on the iteration budget or when the
    projected-gradient norm drops below ``stationarity_tol``.
    """
    if cfg.gradient_mode not in ("ift", "finite-difference"):
        raise ValueError("run_first_order needs gradient_mode ift or finite-difference")
    cfg = cfg.resolve(context.net.n_edges)
    context = _context_with_gamma(context, cfg.gamma)
    attack = start if start is not None else context.identity()
    trace = LearningTrace()
    for t in range(cfg.outer_iters):
        tick = time.perf_counter()
        eta = cfg.eta0 * cfg.anneal**t
        pwe = context.solve(attack, cfg.solver)
        ev = attack_utility(attack, pwe, context.s_star, context.gamma)
        grad_theta, grad_d = _first_order_gradient(attack, pwe, context, cfg)
        grad_norm = math.sqrt(
            float(np.sum(grad_theta**2)) + float(np.sum(grad_d**2))
        )
        proj_norm = projected_gradient_norm(attack, grad_theta, grad_d, eta)
        trace.rows.append(
            TraceRow(
                iteration=t,
                utility=ev.utility,
                ppoa=ev.ppoa,
                cost_term=ev.cost_term,
                grad_norm=grad_norm,
                proj_grad_norm=proj_norm,
                eta=eta,
                pwe_iters=pwe.iters,
                pwe_rel_gap=pwe.rel_gap,
                pwe_converged=pwe.converged,
                wall_time=time.perf_counter() - tick,
                checkpoint=_save_checkpoint(attack, checkpoint_dir, t),
            )
        )
        if proj_norm <= cfg.stationarity_tol:
            trace.halted_by = "stationarity"
            return attack, trace
        attack = project_to_C(
            attack.phi_theta - eta * grad_theta, attack.phi_d - eta * grad_d
        )
    return attack, trace


def run_zeroth_order(
    context: AttackContext,
    cfg: LearnerConfig,
    start: AttackParams | None = None,
    checkpoint_dir=None,
) -> tuple[AttackParams, LearningTrace]:
    """Bandit-feedback attack learning via one-point gradient estimates.

    Per outer iteration: draw m perturbations for each operator, evaluate the
    utility at the projected perturbed attacks (each a full equilibrium
    solve), average into the smoothed-gradient estimate, step, project,
    anneal.  A fixed seed gives a bit-identical trace.  More than 20% probe
    failures in one iteration aborts with the partial trace attached.
    """
    if cfg.gradient_mode != "zeroth-order":
        raise ValueError("run_zeroth_order needs gradient_mode zeroth-order")
    cfg = cfg.resolve(context.net.n_edges)
    context = _context_with_gamma(context, cfg.gamma)
    rng = np.random.default_rng(cfg.rng_seed)
    attack = start if start is not None else context.identity()
    trace = LearningTrace()
    for t in range(cfg.outer_iters):
        tick = time.perf_counter()
        eta = cfg.eta0 * cfg.anneal**t
        pwe = context.solve(attack, cfg.solver)
        ev = attack_utility(attack, pwe, context.s_star, context.gamma)
        try:
            est_theta, est_d, _diag = smoothed_gradient(
                attack,
                context,
                cfg.m,
                cfg.r,
                rng,
                sampling=cfg.sampling_mode,
                solver_cfg=cfg.solver,
                warm=pwe if cfg.warm_probes else None,
            )
        except EstimatorError as exc:
            trace.halted_by = "probe-failures"
            raise LearningAborted(str(exc), attack, trace) from exc
        grad_norm = math.sqrt(float(np.sum(est_theta**2)) + float(np.sum(est_d**2)))
        trace.rows.append(
            TraceRow(
                iteration=t,
                utility=ev.utility,
                ppoa=ev.ppoa,
                cost_term=ev.cost_term,
                grad_norm=grad_norm,
                proj_grad_norm=None,
                eta=eta,
                pwe_iters=pwe.iters,
                pwe_rel_gap=pwe.rel_gap,
                pwe_converged=pwe.converged,
                wall_time=time.perf_counter() - tick,
                checkpoint=_save_checkpoint(attack, checkpoint_dir, t),
            )
        )
        attack = project_to_C(
            attack.phi_theta - eta * est_theta, attack.phi_d - eta * est_d
        )
    return attack, trace


@dataclass
class DSEReport:
    """First- and second-order stationarity diagnostics at an attack point.

    The Hessian is a finite-difference estimate restricted to the tangent
    space of the feasible set; whether it is positive definite there depends
    on the disruption weight.
    """

    projected_grad_norm: float
    first_order_ok: bool
    hessian_min_eig: float | None
    second_order_ok: bool | None
    gradient_mode_used: str
    tol: float


def check_dse(
    attack: AttackParams,
    context: AttackContext,
    tol: float = 1e-4,
    hessian: bool = True,
    hessian_step: float = 1e-3,
) -> DSEReport:
    """Differential-Stackelberg-equilibrium check at ``attack``.

    First-order: projected-gradient norm against ``tol`` using the best
    available gradient (implicit differentiation when the topology supports
    it, else finite differences).  Second-order: smallest eigenvalue of a
    central-difference Hessian of the utility restricted to the tangent
    space of the feasible set; probes may dip just outside the set, where
    the utility extends smoothly.
    """
    cfg = context.solver_for_gap(1e-8)
    pwe = context.solve(attack, cfg)

    mode = "ift"
    try:
        grad_theta, grad_d = gradient_via_ift(attack, pwe, context)
    except (IFTHypothesisError, ValueError):
        grad_theta, grad_d = fd_gradient(attack, context)
        mode = "finite-difference"
    proj_norm = projected_gradient_norm(attack, grad_theta, grad_d)

    min_eig = None
    second_ok = None
    if hessian:
        n, w = attack.n_edges, attack.n_od
        dirs: list[tuple[np.ndarray, np.ndarray]] = []
        for j in range(n):
            for v in tangent_basis(n):
                U = np.zeros((n, n))
                U[:, j] = v
                dirs.append((U, np.zeros((w, w))))
        for j in range(w):
            for v in tangent_basis(w):
                V = np.zeros((w, w))
                V[:, j] = v
                dirs.append((np.zeros((n, n)), V))
        k = len(dirs)
        h = hessian_step

        def value(U, V):
            ev = context.evaluate_raw(
                attack.phi_theta + U, attack.phi_d + V, cfg, warm=pwe
            )
            return ev.utility

        H = np.zeros((k, k))
        for a_idx in range(k):
            Ua, Va = dirs[a_idx]
            for b_idx in range(a_idx, k):
                Ub, Vb = dirs[b_idx]
                val = (
                    value(h * (Ua + Ub), h * (Va + Vb))
                    - value(h * (Ua - Ub), h * (Va - Vb))
                    - value(h * (Ub - Ua), h * (Vb - Va))
                    + value(-h * (Ua + Ub), -h * (Va + Vb))
                ) / (4.0 * h * h)
                H[a_idx, b_idx] = H[b_idx, a_idx] = val
        if k:
            min_eig = float(np.linalg.eigvalsh(H).min())
            second_ok = min_eig > 0.0
        else:
            min_eig, second_ok = 0.0, True

    return DSEReport(
        projected_grad_norm=proj_norm,
        first_order_ok=proj_norm <= tol,
        hessian_min_eig=min_eig,
        second_order_ok=second_ok,
        gradient_mode_used=mode,
        tol=tol,
    )
