#!/usr/bin/env python3
"""Cross-validate analytic equilibrium-sensitivity gradients against the
finite-difference oracle on small instances, and print the error table.

    python scripts/run_gradient_validation.py
"""

import sys
import time

import numpy as np

from wardrop.equilibrium import SolverConfig
from wardrop.latency import Affine, BPR
from wardrop.network import Edge, Network, enumerate_paths
from wardrop.poisoning import AttackContext, AttackParams, identity_attack, project_to_C
from wardrop.sensitivity import fd_gradient, gradient_via_ift, project_tangent

CFG = SolverConfig(rel_gap_tol=1e-10, max_iters=20000, line_search_tol=1e-12)


def parallel(latencies, demand):
    return Network(
        [0, 1], [Edge(0, 1, f) for f in latencies], [(0, 1)], np.array([demand])
    )


def braess():
    edges = [
        Edge(0, 1, Affine(10.0, 0.0)),
        Edge(0, 2, Affine(1.0, 50.0)),
        Edge(1, 3, Affine(1.0, 50.0)),
        Edge(2, 3, Affine(10.0, 0.0)),
        Edge(1, 2, Affine(1.0, 10.0)),
    ]
    return Network([0, 1, 2, 3], edges, [(0, 3)], np.array([6.0]))


def near_identity(rng, n, spread=0.2):
    raw = (1 - spread) * np.eye(n) + spread * rng.random((n, n))
    return project_to_C(raw, np.eye(1)).phi_theta


def main() -> int:
    rng = np.random.default_rng(2024)
    cases = [
        ("2 affine links / identity", parallel([Affine(1.0, 1.0), Affine(2.0, 0.5)], 1.0),
         identity_attack(2, 1), 0.5, None),
        ("2 affine links / random", parallel([Affine(1.0, 1.0), Affine(2.0, 0.5)], 1.0),
         AttackParams(near_identity(rng, 2), np.eye(1)), 0.8, None),
        ("2 BPR links / identity",
         parallel([BPR(1.0, 1.5, 0.15, 4.0), BPR(1.3, 3.0, 0.6, 4.0)], 2.0),
         identity_attack(2, 1), 1.0, None),
        ("3 affine links / random",
         parallel([Affine(1.0, 1.0), Affine(2.0, 0.5), Affine(0.7, 1.2)], 2.0),
         AttackParams(near_identity(rng, 3), np.eye(1)), 0.8, None),
        ("Braess diamond / identity (path form)", braess(),
         identity_attack(5, 1), 20.0, 10),
        ("Braess diamond / random (path form)", braess(),
         AttackParams(near_identity(rng, 5, 0.1), np.eye(1)), 10.0, 10),
    ]
    worst = 0.0
    for label, net, attack, gamma, k_paths in cases:
        paths = enumerate_paths(net, k_paths) if k_paths else None
        ctx = AttackContext.build(net, net.latencies(), gamma=gamma, solver=CFG,
                                  paths=paths)
        t0 = time.perf_counter()
        pwe = ctx.solve(attack)
        analytic = project_tangent(gradient_via_ift(attack, pwe, ctx)[0])
        numeric = fd_gradient(attack, ctx)[0]
        err = np.abs(analytic - numeric).max() / max(1.0, np.abs(analytic).max())
        worst = max(worst, err)
        print(f"{label:45s} rel err {err:9.2e}  ({time.perf_counter() - t0:.2f}s)")
    print(f"worst relative error: {worst:.2e}")
    return 0 if worst <= 1e-4 else 1


if __name__ == "__main__":
    sys.exit(main())
