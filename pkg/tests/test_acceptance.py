"""Acceptance suite: one test per release criterion, each printing a
pass/fail line (run with ``pytest -v`` or ``-s``).

The heavyweight criteria (case-study disruption, utility smoothness bound)
run full equilibrium solves on the bundled Sioux Falls evacuation scenario
and are the slow part of the suite.
"""

import itertools
import time

import numpy as np

from wardrop.equilibrium import SolverConfig, solve_pwe, solve_so, solve_we
from wardrop.latency import Affine, BPR
from wardrop.network import enumerate_paths
from wardrop.poisoning import (
    AttackContext,
    AttackParams,
    identity_attack,
    project_columns_to_simplex,
    project_to_C,
)
from wardrop.learning import LearnerConfig, run_zeroth_order
from wardrop.sensitivity import (
    estimate_sensitivity_constants,
    fd_gradient,
    gradient_via_ift,
    h_sample,
    one_point_estimate,
    project_tangent,
    smoothness_constants,
)

from conftest import braess_net, parallel_net, random_column_stochastic

TIGHT = SolverConfig(rel_gap_tol=1e-10, max_iters=20000, line_search_tol=1e-12)
GRAD_CFG = SolverConfig(rel_gap_tol=1e-10, max_iters=20000, line_search_tol=1e-12)


def _announce(criterion: str, ok: bool, detail: str):
    print(f"[acceptance] {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{criterion}: {detail}"


# -- criterion 1: Pigou price of anarchy -----------------------------------------


def test_criterion_1_pigou_poa(pigou):
    start = time.perf_counter()
    we = solve_we(pigou, pigou.latencies(), cfg=TIGHT)
    so = solve_so(pigou, pigou.latencies(), cfg=TIGHT)
    poa = we.aggregated_latency / so.aggregated_latency
    elapsed = time.perf_counter() - start
    ok = abs(poa - 4.0 / 3.0) <= 1e-6 and elapsed < 1.0
    _announce(
        "criterion 1 (Pigou PoA = 4/3)",
        ok,
        f"poa={poa:.9f}, runtime={elapsed:.3f}s",
    )


# -- criterion 2: identity-attack equivalence --------------------------------------


def test_criterion_2_identity_attack_equivalence(sioux_falls):
    start = time.perf_counter()
    fs = sioux_falls.latencies()
    we = solve_we(sioux_falls, fs)
    so = solve_so(sioux_falls, fs)
    pwe = solve_pwe(
        sioux_falls, fs, sioux_falls.demand,
        identity_attack(sioux_falls.n_edges, sioux_falls.n_od),
    )
    flow_gap = float(np.abs(pwe.flow.q - we.flow.q).max())
    bound = 1e-6 * sioux_falls.total_demand
    poa = we.aggregated_latency / so.aggregated_latency
    ppoa = pwe.aggregated_latency / so.aggregated_latency
    elapsed = time.perf_counter() - start
    ok = flow_gap <= bound and abs(ppoa - poa) <= 1e-6 and elapsed < 60.0
    _announce(
        "criterion 2 (identity attack == WE on Sioux Falls)",
        ok,
        f"flow_gap={flow_gap:.2e} (bound {bound:.2e}), |ppoa-poa|={abs(ppoa - poa):.2e}, "
        f"runtime={elapsed:.1f}s",
    )


# -- criterion 3: Frank-Wolfe convergence -------------------------------------------


def test_criterion_3_frank_wolfe_convergence(sioux_falls):
    # the solver hard-asserts a nonincreasing objective at every iteration,
    # so reaching this point means no iteration ever increased it
    cfg = SolverConfig(rel_gap_tol=1e-6, max_iters=5000)
    we = solve_we(sioux_falls, sioux_falls.latencies(), cfg=cfg)
    so = solve_so(sioux_falls, sioux_falls.latencies(), cfg=cfg)
    ok = (
        we.converged and so.converged
        and we.rel_gap <= 1e-6 and so.rel_gap <= 1e-6
        and we.iters <= 5000 and so.iters <= 5000
    )
    _announce(
        "criterion 3 (WE/SO reach 1e-6 gap within 5000 iterations)",
        ok,
        f"we: gap={we.rel_gap:.2e} iters={we.iters}; "
        f"so: gap={so.rel_gap:.2e} iters={so.iters}",
    )


# -- criterion 4: analytic gradients vs finite differences ---------------------------


def _gradient_instances():
    rng = np.random.default_rng(2024)

    def near_identity(n, spread=0.2):
        raw = (1 - spread) * np.eye(n) + spread * rng.random((n, n))
        return AttackParams(project_columns_to_simplex(raw), np.eye(1))

    two_affine = [Affine(1.0, 1.0), Affine(2.0, 0.5)]
    three_affine = [Affine(1.0, 1.0), Affine(2.0, 0.5), Affine(0.7, 1.2)]
    two_bpr = [BPR(1.0, 1.5, 0.15, 4.0), BPR(1.3, 3.0, 0.6, 4.0)]
    yield "2 affine / identity", parallel_net(two_affine, 1.0), identity_attack(2, 1), 0.5, None
    yield "2 affine / random", parallel_net(two_affine, 1.0), near_identity(2), 0.8, None
    yield "2 BPR / identity", parallel_net(two_bpr, 2.0), identity_attack(2, 1), 1.0, None
    yield "3 affine / random", parallel_net(three_affine, 2.0), near_identity(3), 0.8, None
    yield "Braess / identity", braess_net(), identity_attack(5, 1), 20.0, 10
    yield "Braess / random", braess_net(), near_identity(5, 0.1), 10.0, 10


def test_criterion_4_gradient_correctness():
    start = time.perf_counter()
    details = []
    worst = 0.0
    count = 0
    for label, net, attack, gamma, k_paths in _gradient_instances():
        paths = enumerate_paths(net, k_paths) if k_paths else None
        ctx = AttackContext.build(
            net, net.latencies(), gamma=gamma, solver=GRAD_CFG, paths=paths
        )
        pwe = ctx.solve(attack)
        assert (attack.phi_theta @ pwe.flow.q).min() > 1e-2, f"{label}: not interior"
        analytic_t = project_tangent(gradient_via_ift(attack, pwe, ctx)[0])
        numeric_t = fd_gradient(attack, ctx)[0]
        err = float(np.abs(analytic_t - numeric_t).max()) / max(
            1e-12, float(np.abs(analytic_t).max())
        )
        details.append(f"{label}: {err:.2e}")
        worst = max(worst, err)
        count += 1
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and count >= 5 and elapsed < 60.0
    _announce(
        "criterion 4 (IFT gradient vs finite differences <= 1e-4)",
        ok,
        f"{count} instances, worst={worst:.2e}, runtime={elapsed:.1f}s; " + "; ".join(details),
    )


# -- criterion 5: one-point estimator validity ----------------------------------------


def test_criterion_5_estimator_validity():
    dim = 9
    rng = np.random.default_rng(7)
    c = rng.standard_normal(dim)
    c /= np.linalg.norm(c)
    r = 1.0

    def run_trial(m, rng_):
        g = rng_.standard_normal((m, dim))
        dirs = r * g / np.linalg.norm(g, axis=1, keepdims=True)
        values = dirs @ c  # centered linear surrogate on the sphere
        est = one_point_estimate(values, dirs, dim, r, "sphere")
        return float(np.linalg.norm(est - c))

    details = []
    ok = True
    for eps in [0.5, 0.1]:
        m = h_sample(dim, 1.0 / eps, value_bound=1.0, r=r)
        errors = [run_trial(m, np.random.default_rng(1000 + t)) for t in range(100)]
        success = float(np.mean([e <= eps for e in errors]))
        mean_error = float(np.mean(errors))
        details.append(
            f"eps={eps}: m={m}, mean_err={mean_error:.3f}, success={success:.2f}"
        )
        ok = ok and mean_error < eps and success >= 0.95

    # empirical standard error halves when the sample count quadruples
    m0 = 500
    rng_b = np.random.default_rng(55)
    small = [run_trial(m0, rng_b) for _ in range(300)]
    large = [run_trial(4 * m0, rng_b) for _ in range(300)]
    ratio = float(np.sqrt(np.mean(np.square(large)) / np.mean(np.square(small))))
    details.append(f"se ratio (4m vs m)={ratio:.3f}")
    ok = ok and 0.4 <= ratio <= 0.6
    _announce("criterion 5 (one-point estimator validity)", ok, "; ".join(details))


# -- criterion 6: case-study disruption ------------------------------------------------


def test_criterion_6_case_study_disruption(sioux_falls):
    start = time.perf_counter()
    gamma = float(np.sqrt(sioux_falls.n_edges))
    m = int(round(np.sqrt(sioux_falls.n_edges)))
    ctx = AttackContext.build(sioux_falls, sioux_falls.latencies(), gamma=gamma)
    poa = ctx.poa
    trajectories = []
    overloaded_counts = []
    for seed in [0, 1, 2]:
        cfg = LearnerConfig(
            eta0=0.002,
            gamma=gamma,
            m=m,
            r=0.1,
            outer_iters=30,
            sampling_mode="gaussian",
            gradient_mode="zeroth-order",
            rng_seed=seed,
        )
        final, trace = run_zeroth_order(ctx, cfg)
        assert len(trace) == 30
        trajectories.append([row.ppoa for row in trace.rows])
        pwe = ctx.solve(final)
        caps = np.array([e.capacity for e in sioux_falls.edges])
        overloaded_counts.append(int(np.sum(pwe.flow.q / caps > 1.0)))
    avg = np.mean(np.array(trajectories), axis=0)
    final_avg = float(avg[-1])
    smoothed = np.convolve(avg, np.ones(5) / 5, mode="valid")
    nondecreasing_frac = float((np.diff(smoothed) >= 0).mean())
    elapsed = time.perf_counter() - start
    ok = (
        final_avg >= 1.25 * poa
        and nondecreasing_frac >= 0.8
        and min(overloaded_counts) >= 1
        and elapsed < 1800.0
    )
    _announce(
        "criterion 6 (evacuation disruption properties)",
        ok,
        f"final PPoA(avg 3 seeds)={final_avg:.2f} vs 1.25*PoA={1.25 * poa:.2f}, "
        f"smoothed nondecreasing frac={nondecreasing_frac:.2f}, "
        f"overloaded edges per seed={overloaded_counts}, runtime={elapsed:.0f}s",
    )


# -- criterion 7: simplex projection ----------------------------------------------------


def _projection_oracle(v: np.ndarray) -> np.ndarray:
    n = len(v)
    best, best_x = np.inf, None
    for size in range(1, n + 1):
        for support in itertools.combinations(range(n), size):
            s = np.array(support)
            tau = (1.0 - v[s].sum()) / size
            x = np.zeros(n)
            x[s] = v[s] + tau
            if np.any(x[s] < -1e-12):
                continue
            off = np.setdiff1d(np.arange(n), s)
            if off.size and np.any(v[off] + tau > 1e-12):
                continue
            dist = float(np.sum((x - v) ** 2))
            if dist < best:
                best, best_x = dist, x
    return best_x


def test_criterion_7_projection_correctness():
    rng = np.random.default_rng(31)
    worst = 0.0
    for _ in range(100):
        mat = rng.normal(0.0, 2.0, size=(10, 10))
        got = project_columns_to_simplex(mat)
        for j in range(10):
            want = _projection_oracle(mat[:, j])
            worst = max(worst, float(np.abs(got[:, j] - want).max()))
    expansive = 0
    for _ in range(1000):
        x = rng.normal(size=(6, 6))
        y = x + rng.normal(scale=0.7, size=(6, 6))
        px = project_columns_to_simplex(x)
        py = project_columns_to_simplex(y)
        if np.linalg.norm(px - py) > np.linalg.norm(x - y) + 1e-12:
            expansive += 1
    ok = worst <= 1e-8 and expansive == 0
    _announce(
        "criterion 7 (projection vs QP oracle, nonexpansive)",
        ok,
        f"max oracle deviation={worst:.2e} over 100 instances, "
        f"expansive pairs={expansive}/1000",
    )


# -- criterion 8: conservation ------------------------------------------------------------


def test_criterion_8_conservation(sioux_falls, braess):
    rng = np.random.default_rng(4)
    worst_lambda = worst_delta = 0.0
    cases = []
    fs_sf = sioux_falls.latencies()
    cases.append((sioux_falls, solve_we(sioux_falls, fs_sf)))
    cases.append((sioux_falls, solve_so(sioux_falls, fs_sf)))
    attack = AttackParams(
        random_column_stochastic(rng, sioux_falls.n_edges, 0.3),
        random_column_stochastic(rng, sioux_falls.n_od, 0.3),
    )
    cases.append(
        (sioux_falls, solve_pwe(sioux_falls, fs_sf, sioux_falls.demand, attack))
    )
    cases.append((braess, solve_we(braess, braess.latencies(), cfg=TIGHT)))
    for net, res in cases:
        flow = res.recover_paths()
        lam = np.zeros(net.n_od)
        agg = np.zeros(net.n_edges)
        for mu_p, w, p in zip(flow.mu, flow.od_of_path, flow.paths):
            lam[w] += mu_p
            for e in p:
                agg[e] += mu_p
        worst_lambda = max(
            worst_lambda, float(np.abs(lam - res.demand_effective).max())
        )
        worst_delta = max(worst_delta, float(np.abs(agg - flow.q).max()))

    worst_mass = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 30))
        phi = random_column_stochastic(rng, n)
        q = rng.uniform(0.0, 5.0, size=n)
        worst_mass = max(
            worst_mass, abs(float(np.abs(phi @ q).sum()) - float(q.sum()))
        )
    ok = worst_lambda <= 1e-8 and worst_delta <= 1e-8 and worst_mass <= 1e-10
    _announce(
        "criterion 8 (conservation suite)",
        ok,
        f"|lambda mu - Q|={worst_lambda:.2e}, |delta mu - q|={worst_delta:.2e}, "
        f"mass drift={worst_mass:.2e}",
    )


# -- criterion 9: smoothness bound ----------------------------------------------------------


def test_criterion_9_smoothness_bound(sioux_falls):
    start = time.perf_counter()
    gamma = float(np.sqrt(sioux_falls.n_edges))
    ctx = AttackContext.build(sioux_falls, sioux_falls.latencies(), gamma=gamma)
    rng = np.random.default_rng(12)
    l_q, c0_est, c1_est = estimate_sensitivity_constants(
        ctx, n_samples=40, delta=1e-3, rng=rng, percentile=99.0
    )
    bound = smoothness_constants(
        sioux_falls,
        sioux_falls.latencies(),
        sioux_falls.demand,
        gamma,
        ctx.s_star,
        l_q,
        c0_est,
        c1_est,
    )

    # a random walk of nearby feasible attacks: consecutive points give the
    # 1000 nearby pairs, each evaluated once
    n, w = sioux_falls.n_edges, sioux_falls.n_od
    attack = ctx.identity()
    ev_prev = ctx.evaluate(attack)
    z_prev = np.concatenate([attack.theta(), attack.d()])
    violations = []
    quotients = []
    warm = ctx.solve(attack)
    for step in range(1000):
        dt = project_tangent(rng.standard_normal((n, n)))
        dd = project_tangent(rng.standard_normal((w, w)))
        scale = 2e-3 / np.sqrt(np.sum(dt * dt) + np.sum(dd * dd))
        candidate = project_to_C(
            attack.phi_theta + scale * dt, attack.phi_d + scale * dd
        )
        ev = ctx.evaluate(candidate, warm=warm)
        z = np.concatenate([candidate.theta(), candidate.d()])
        dist = float(np.linalg.norm(z - z_prev))
        if dist > 1e-12:
            quotient = abs(ev.utility - ev_prev.utility) / dist
            quotients.append(quotient)
            if quotient > bound.L0:
                violations.append((step, quotient))
        attack, ev_prev, z_prev = candidate, ev, z
    elapsed = time.perf_counter() - start
    ok = len(violations) == 0 and len(quotients) >= 1000 - 1
    _announce(
        "criterion 9 (utility Lipschitz quotients below L0)",
        ok,
        f"L0={bound.L0:.2f} (l_q 99th pct={l_q:.2f}), max quotient="
        f"{max(quotients):.2f}, violations={violations[:5]}, "
        f"pairs={len(quotients)}, runtime={elapsed:.0f}s",
    )
