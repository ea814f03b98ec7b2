"""Command-line experiment harness.

Three subcommands: ``solve`` computes equilibria and writes per-edge flow
tables, ``attack`` runs a poisoning-learning loop and writes its trace plus
an edge-level comparison against the unpoisoned system optimum, ``report``
aggregates artifacts into a compact JSON summary.

All CSV artifacts have fixed column orders, and attack traces are
byte-identical across runs with the same seed.  Exit codes: 0 success,
1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .equilibrium import EquilibriumResult, SolverConfig, solve_pwe, solve_so, solve_we
from .latency import BPR, Affine, LatencyBundle, Polynomial
from .learning import LearnerConfig, LearningAborted, run_first_order, run_zeroth_order
from .network import Network, NetworkError, TNTPParseError, parse_tntp
from .poisoning import AttackContext, AttackParams

__all__ = ["ExperimentConfig", "main", "cmd_solve", "cmd_attack", "cmd_report"]

DATA_ENV_VAR = "WARDROP_DATA_DIR"

FLOWS_COLUMNS = ["kind", "edge", "tail", "head", "flow", "time", "utilization"]
EDGE_REPORT_COLUMNS = [
    "edge",
    "tail",
    "head",
    "so_flow",
    "pwe_flow",
    "so_time",
    "pwe_time",
    "so_utilization",
    "pwe_utilization",
]


@dataclass
class ExperimentConfig:
    """Everything a run needs; JSON config files carry the same field names
    and command-line flags override them."""

    network: str = "siouxfalls_net.tntp"
    trips: str = "siouxfalls_evacuation_trips.tntp"
    latency_overrides: list = field(default_factory=list)
    gamma: float | None = None
    gamma_scale: float = 1.0
    eta0: float | None = 0.002
    anneal: float = 0.95
    m: int | None = None
    r: float = 0.1
    outer_iters: int = 30
    seed: int = 0
    sampling_mode: str = "gaussian"
    gradient_mode: str = "zeroth-order"
    rel_gap_tol: float = 1e-6
    max_iters: int = 5000
    stationarity_tol: float = 1e-4
    fd_fallback: bool = False
    save_checkpoints: bool = False

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        payload = json.loads(Path(path).read_text())
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**payload)

    def solver(self) -> SolverConfig:
        return SolverConfig(rel_gap_tol=self.rel_gap_tol, max_iters=self.max_iters)

    def learner(self, gradient_mode: str, gamma: float) -> LearnerConfig:
        return LearnerConfig(
            eta0=self.eta0,
            anneal=self.anneal,
            gamma=gamma,
            m=self.m,
            r=self.r,
            outer_iters=self.outer_iters,
            solver=self.solver(),
            rng_seed=self.seed,
            sampling_mode=self.sampling_mode,
            gradient_mode=gradient_mode,
            stationarity_tol=self.stationarity_tol,
            fd_fallback=self.fd_fallback,
        )

    def resolve_gamma(self, n_edges: int) -> float:
        if self.gamma is not None:
            return self.gamma
        return self.gamma_scale * math.sqrt(n_edges)


def _data_candidates(name: str):
    yield Path(name)
    env = os.environ.get(DATA_ENV_VAR)
    if env:
        yield Path(env) / name
    yield resources.files("wardrop") / "data" / name


def resolve_data_path(name: str):
    for candidate in _data_candidates(name):
        try:
            if candidate.is_file():
                return candidate
        except OSError:
            continue
    raise FileNotFoundError(
        f"cannot find {name!r} (searched cwd, ${DATA_ENV_VAR}, bundled data)"
    )


def _override_latency(spec: dict):
    kind = spec.get("kind")
    if kind == "bpr":
        return BPR(spec["t_f"], spec["capacity"], spec.get("alpha", 0.15), spec.get("beta", 4.0))
    if kind == "affine":
        return Affine(spec["a"], spec["b"])
    if kind == "polynomial":
        return Polynomial(tuple(spec["coeffs"]))
    raise ValueError(f"unknown latency override kind {kind!r}")


def load_network(config: ExperimentConfig) -> Network:
    net_text = Path(resolve_data_path(config.network)).read_text()
    trips_text = Path(resolve_data_path(config.trips)).read_text()
    net = parse_tntp(net_text, trips_text)
    if config.latency_overrides:
        fams = net.latencies()
        for spec in config.latency_overrides:
            fams[int(spec["edge"])] = _override_latency(spec)
        net = net.with_latencies(fams)
    return net


def _write_csv(path: Path, header: list[str], rows: list[list[str]]):
    lines = [",".join(header)] + [",".join(row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def _utilization(net: Network, q: np.ndarray) -> np.ndarray:
    caps = np.array(
        [e.capacity if e.capacity is not None else np.nan for e in net.edges]
    )
    with np.errstate(invalid="ignore"):
        return q / caps


def _flow_rows(kind: str, net: Network, result: EquilibriumResult) -> list[list[str]]:
    bundle = LatencyBundle(net.latencies())
    q = result.flow.q
    times = bundle.eval(q)
    util = _utilization(net, q)
    rows = []
    for e in range(net.n_edges):
        rows.append(
            [
                kind,
                str(e),
                str(net.node_labels[net.edges[e].tail]),
                str(net.node_labels[net.edges[e].head]),
                repr(float(q[e])),
                repr(float(times[e])),
                repr(float(util[e])),
            ]
        )
    return rows


def cmd_solve(kinds: list[str], config: ExperimentConfig, out_dir: str,
              attack_path: str | None = None) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net = load_network(config)
    fs = net.latencies()
    solver = config.solver()
    attack = None
    if "pwe" in kinds:
        if attack_path is None:
            print("solve: kind pwe needs --attack CHECKPOINT", file=sys.stderr)
            return 1
        attack = AttackParams.from_json(Path(attack_path).read_text())

    rows: list[list[str]] = []
    summary: dict = {
        "network": config.network,
        "trips": config.trips,
        "n_edges": net.n_edges,
        "n_od_pairs": net.n_od,
        "total_demand": net.total_demand,
        "kinds": {},
    }
    results: dict[str, EquilibriumResult] = {}
    for kind in kinds:
        if kind == "we":
            res = solve_we(net, fs, cfg=solver)
        elif kind == "so":
            res = solve_so(net, fs, cfg=solver)
        elif kind == "pwe":
            res = solve_pwe(net, fs, net.demand, attack, solver)
        else:
            print(f"solve: unknown kind {kind!r}", file=sys.stderr)
            return 1
        results[kind] = res
        rows.extend(_flow_rows(kind, net, res))
        summary["kinds"][kind] = {
            "aggregated_latency": res.aggregated_latency,
            "objective": res.objective,
            "rel_gap": res.rel_gap,
            "iters": res.iters,
            "converged": res.converged,
        }
    if "we" in results and "so" in results:
        summary["poa"] = (
            results["we"].aggregated_latency / results["so"].aggregated_latency
        )
    if "pwe" in results and "so" in results:
        summary["ppoa"] = (
            results["pwe"].aggregated_latency / results["so"].aggregated_latency
        )
    _write_csv(out / "flows.csv", FLOWS_COLUMNS, rows)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return 0


def _edge_report_rows(net: Network, so: EquilibriumResult, pwe: EquilibriumResult):
    bundle = LatencyBundle(net.latencies())
    so_q, pwe_q = so.flow.q, pwe.flow.q
    so_t, pwe_t = bundle.eval(so_q), bundle.eval(pwe_q)
    so_u, pwe_u = _utilization(net, so_q), _utilization(net, pwe_q)
    rows = []
    for e in range(net.n_edges):
        rows.append(
            [
                str(e),
                str(net.node_labels[net.edges[e].tail]),
                str(net.node_labels[net.edges[e].head]),
                repr(float(so_q[e])),
                repr(float(pwe_q[e])),
                repr(float(so_t[e])),
                repr(float(pwe_t[e])),
                repr(float(so_u[e])),
                repr(float(pwe_u[e])),
            ]
        )
    return rows


def cmd_attack(mode: str, config: ExperimentConfig, out_dir: str) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net = load_network(config)
    gamma = config.resolve_gamma(net.n_edges)
    context = AttackContext.build(
        net, net.latencies(), gamma=gamma, solver=config.solver()
    )
    if mode == "zeroth":
        learner = config.learner("zeroth-order", gamma)
    elif mode == "first":
        grad_mode = (
            "ift" if config.gradient_mode == "zeroth-order" else config.gradient_mode
        )
        learner = config.learner(grad_mode, gamma)
    else:
        print(f"attack: unknown mode {mode!r}", file=sys.stderr)
        return 1

    checkpoint_dir = (out / "checkpoints") if config.save_checkpoints else None
    started = time.perf_counter()
    aborted = None
    try:
        if mode == "zeroth":
            final, trace = run_zeroth_order(context, learner, checkpoint_dir=checkpoint_dir)
        else:
            final, trace = run_first_order(context, learner, checkpoint_dir=checkpoint_dir)
    except LearningAborted as exc:
        final, trace = exc.attack, exc.trace
        aborted = str(exc)
    except (ValueError, RuntimeError) as exc:
        # config and inputs were valid; the learning run itself failed
        print(f"attack: {exc}", file=sys.stderr)
        return 2
    elapsed = time.perf_counter() - started

    (out / "trace.csv").write_text("\n".join(trace.csv_lines()) + "\n")
    (out / "attack_final.json").write_text(final.to_json() + "\n")
    pwe = context.solve(final)
    _write_csv(
        out / "edge_report.csv",
        EDGE_REPORT_COLUMNS,
        _edge_report_rows(net, context.so_result, pwe),
    )
    meta = {
        "mode": mode,
        "gamma": gamma,
        "seed": config.seed,
        "outer_iters_completed": len(trace),
        "halted_by": trace.halted_by,
        "wall_time_seconds": elapsed,
        "final_ppoa": pwe.aggregated_latency / context.s_star,
        "unpoisoned_poa": context.poa,
        "aborted": aborted,
    }
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    if aborted is not None:
        print(f"attack: aborted after {len(trace)} iterations: {aborted}", file=sys.stderr)
        return 2
    return 0


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    lines = path.read_text().strip().splitlines()
    header = lines[0].split(",")
    return header, [line.split(",") for line in lines[1:]]


def cmd_report(artifacts_dir: str, top_k: int = 5, out_path: str | None = None) -> int:
    art = Path(artifacts_dir)
    report: dict = {"artifacts_dir": str(art), "top_k": top_k}

    edge_report = art / "edge_report.csv"
    flows = art / "flows.csv"
    if edge_report.is_file():
        header, rows = _read_csv(edge_report)
        col = {name: i for i, name in enumerate(header)}
        entries = []
        for row in rows:
            so_t, pwe_t = float(row[col["so_time"]]), float(row[col["pwe_time"]])
            entries.append(
                {
                    "edge": int(row[col["edge"]]),
                    "time_ratio": pwe_t / so_t if so_t > 0 else float("nan"),
                    "utilization": float(row[col["pwe_utilization"]]),
                }
            )
        by_ratio = sorted(entries, key=lambda r: -r["time_ratio"])[:top_k]
        by_util = sorted(entries, key=lambda r: -r["utilization"])[:top_k]
        overloaded = [r["edge"] for r in entries if r["utilization"] > 1.0]
        report["top_time_ratio"] = [
            {"edge": r["edge"], "ratio": r["time_ratio"]} for r in by_ratio
        ]
        report["top_utilization"] = [
            {"edge": r["edge"], "utilization": r["utilization"]} for r in by_util
        ]
        report["overloaded_edges"] = overloaded
        report["n_overloaded"] = len(overloaded)
    elif flows.is_file():
        header, rows = _read_csv(flows)
        col = {name: i for i, name in enumerate(header)}
        entries = [
            {
                "edge": int(row[col["edge"]]),
                "kind": row[col["kind"]],
                "utilization": float(row[col["utilization"]]),
            }
            for row in rows
        ]
        by_util = sorted(entries, key=lambda r: -r["utilization"])[:top_k]
        overloaded = [
            (r["kind"], r["edge"]) for r in entries if r["utilization"] > 1.0
        ]
        report["top_utilization"] = by_util
        report["overloaded_edges"] = [list(t) for t in overloaded]
        report["n_overloaded"] = len(overloaded)
    else:
        print(f"report: no edge_report.csv or flows.csv under {art}", file=sys.stderr)
        return 2

    trace = art / "trace.csv"
    if trace.is_file():
        header, rows = _read_csv(trace)
        if rows:
            col = {name: i for i, name in enumerate(header)}
            report["final_ppoa"] = float(rows[-1][col["ppoa"]])
            report["iterations"] = len(rows)
    summary = art / "summary.json"
    if summary.is_file():
        payload = json.loads(summary.read_text())
        if "poa" in payload:
            report["poa"] = payload["poa"]
        if "ppoa" in payload:
            report["final_ppoa"] = payload["ppoa"]

    text = json.dumps(report, indent=2) + "\n"
    target = Path(out_path) if out_path else art / "report.json"
    target.write_text(text)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wardrop",
        description="traffic equilibria and informational poisoning experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON experiment config file")
        p.add_argument("--net", help="TNTP network file (overrides config)")
        p.add_argument("--trips", help="TNTP trips file (overrides config)")
        p.add_argument("--out", default="artifacts", help="output directory")
        p.add_argument("--rel-gap", type=float, help="solver relative-gap tolerance")
        p.add_argument("--max-iters", type=int, help="solver iteration budget")

    ps = sub.add_parser("solve", help="compute equilibria and write flow tables")
    add_common(ps)
    ps.add_argument("--kind", default="we", help="comma list from we,so,pwe")
    ps.add_argument("--attack", help="attack checkpoint JSON (for kind pwe)")

    pa = sub.add_parser("attack", help="run a poisoning-learning loop")
    add_common(pa)
    pa.add_argument("--mode", choices=["zeroth", "first"], default="zeroth")
    pa.add_argument("--gamma", type=float, help="disruption weight")
    pa.add_argument("--gamma-scale", type=float, help="gamma = scale * sqrt(|E|)")
    pa.add_argument("--eta0", type=float, help="initial learning rate")
    pa.add_argument("--anneal", type=float, help="learning-rate anneal factor")
    pa.add_argument("--m", type=int, help="samples per iteration")
    pa.add_argument("--r", type=float, help="perturbation radius")
    pa.add_argument("--iters", type=int, help="outer iterations (days)")
    pa.add_argument("--seed", type=int, help="random seed")
    pa.add_argument(
        "--sampling", choices=["sphere", "gaussian"], help="perturbation distribution"
    )

    pr = sub.add_parser("report", help="aggregate artifacts into report.json")
    pr.add_argument("--artifacts", required=True, help="artifacts directory")
    pr.add_argument("--top-k", type=int, default=5)
    pr.add_argument("--out", help="report path (default artifacts/report.json)")
    return parser


def _config_from_args(args) -> ExperimentConfig:
    config = (
        ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    )
    if args.net:
        config.network = args.net
    if args.trips:
        config.trips = args.trips
    if args.rel_gap is not None:
        config.rel_gap_tol = args.rel_gap
    if args.max_iters is not None:
        config.max_iters = args.max_iters
    for flag, name in [
        ("gamma", "gamma"),
        ("gamma_scale", "gamma_scale"),
        ("eta0", "eta0"),
        ("anneal", "anneal"),
        ("m", "m"),
        ("r", "r"),
        ("iters", "outer_iters"),
        ("seed", "seed"),
        ("sampling", "sampling_mode"),
    ]:
        value = getattr(args, flag, None)
        if value is not None:
            setattr(config, name, value)
    return config


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "solve":
            config = _config_from_args(args)
            kinds = [k.strip() for k in args.kind.split(",") if k.strip()]
            if not kinds or any(k not in ("we", "so", "pwe") for k in kinds):
                print(f"solve: bad --kind {args.kind!r}", file=sys.stderr)
                return 1
            return cmd_solve(kinds, config, args.out, args.attack)
        if args.command == "attack":
            config = _config_from_args(args)
            return cmd_attack(args.mode, config, args.out)
        if args.command == "report":
            return cmd_report(args.artifacts, args.top_k, args.out)
        return 1
    except (FileNotFoundError, ValueError, TNTPParseError) as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return 1
    except (NetworkError, LearningAborted, AssertionError) as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
