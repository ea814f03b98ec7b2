"""Road network model, TNTP file ingestion, and shortest-path machinery.

Nodes are normalized to contiguous 0-based indices at construction; the
original file labels are retained for reports.  Networks are immutable after
construction and safe to share between concurrent solver runs.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .latency import BPR, LatencyFamily

__all__ = [
    "Edge",
    "Network",
    "PathSet",
    "ShortestPathTree",
    "NetworkError",
    "TNTPParseError",
    "parse_tntp",
    "serialize_tntp",
    "shortest_paths",
    "enumerate_paths",
    "is_parallel_links",
]


class NetworkError(ValueError):
    """Structural problem with a network or a query against it."""


class TNTPParseError(ValueError):
    """Malformed TNTP content; carries the offending line number."""

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


@dataclass(frozen=True)
class Edge:
    """Directed road segment with its latency family.

    ``capacity`` duplicates the BPR capacity when one exists so reports can
    compute utilization even after a latency override.
    """

    tail: int
    head: int
    latency: LatencyFamily
    capacity: float | None = None


@dataclass(eq=False)
class Network:
    """Directed road graph with demand between origin-destination pairs."""

    node_labels: list
    edges: list[Edge]
    od_pairs: list[tuple[int, int]]
    demand: np.ndarray
    _adj: list = field(init=False, repr=False)

    def __post_init__(self):
        self.demand = np.asarray(self.demand, dtype=float)
        n = len(self.node_labels)
        if n == 0 or not self.edges:
            raise NetworkError("network needs at least one node and one edge")
        for e in self.edges:
            if not (0 <= e.tail < n and 0 <= e.head < n):
                raise NetworkError(f"edge ({e.tail}->{e.head}) references unknown node")
            if e.tail == e.head:
                raise NetworkError(f"self-loop at node {self.node_labels[e.tail]}")
        if len(self.od_pairs) != len(self.demand):
            raise NetworkError("demand vector length must match the OD pair count")
        if np.any(self.demand < 0):
            raise NetworkError("demand entries must be nonnegative")
        for o, d in self.od_pairs:
            if not (0 <= o < n and 0 <= d < n):
                raise NetworkError(f"OD pair ({o},{d}) references unknown node")
            if o == d:
                raise NetworkError(f"OD pair with identical endpoints at node {o}")
        if len(set(self.od_pairs)) != len(self.od_pairs):
            raise NetworkError("duplicate OD pairs")
        # adjacency sorted by edge id for deterministic tie-breaking
        adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
        for eid, e in enumerate(self.edges):
            adj[e.tail].append((eid, e.head))
        self._adj = adj
        self._check_weakly_connected()
        self._check_od_reachability()

    # -- basic accessors ---------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return len(self.node_labels)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_od(self) -> int:
        return len(self.od_pairs)

    @property
    def total_demand(self) -> float:
        return float(self.demand.sum())

    def latencies(self) -> list[LatencyFamily]:
        return [e.latency for e in self.edges]

    def free_flow_times(self) -> np.ndarray:
        return np.array([float(e.latency.eval(0.0)) for e in self.edges])

    def with_latencies(self, families: Sequence[LatencyFamily]) -> "Network":
        """Copy of the network with per-edge latency families replaced."""
        families = list(families)
        if len(families) != self.n_edges:
            raise NetworkError("need exactly one latency family per edge")
        edges = [
            Edge(e.tail, e.head, f, e.capacity) for e, f in zip(self.edges, families)
        ]
        return Network(list(self.node_labels), edges, list(self.od_pairs), self.demand.copy())

    def origins(self) -> list[int]:
        seen: list[int] = []
        for o, _ in self.od_pairs:
            if o not in seen:
                seen.append(o)
        return seen

    # -- validation helpers --------------------------------------------------

    def _check_weakly_connected(self):
        n = self.n_nodes
        und: list[set[int]] = [set() for _ in range(n)]
        for e in self.edges:
            und[e.tail].add(e.head)
            und[e.head].add(e.tail)
        seen = {0}
        stack = [0]
        while stack:
            u = stack.pop()
            for v in und[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        if len(seen) != n:
            missing = [self.node_labels[i] for i in range(n) if i not in seen]
            raise NetworkError(f"network is not weakly connected; unreachable nodes {missing}")

    def _check_od_reachability(self):
        zero = np.zeros(self.n_edges)
        for origin in self.origins():
            tree = _dijkstra(self, zero, origin)
            for o, d in self.od_pairs:
                if o == origin and not np.isfinite(tree.dist[d]):
                    raise NetworkError(
                        f"no directed path for OD pair "
                        f"({self.node_labels[o]} -> {self.node_labels[d]})"
                    )

    def diagnostics(self) -> dict:
        """Size and topology summary, including the hop diameter."""
        n = self.n_nodes
        diam = 0
        unit = np.ones(self.n_edges)
        for origin in range(n):
            dist = _dijkstra(self, unit, origin).dist
            finite = dist[np.isfinite(dist)]
            if finite.size:
                diam = max(diam, int(finite.max()))
        return {
            "n_nodes": n,
            "n_edges": self.n_edges,
            "n_od_pairs": self.n_od,
            "total_demand": self.total_demand,
            "hop_diameter": diam,
        }


@dataclass(frozen=True)
class ShortestPathTree:
    """One-to-all shortest distances with predecessor edge ids (-1 at the root)."""

    origin: int
    dist: np.ndarray
    pred: np.ndarray


def _dijkstra(net: Network, costs, origin: int) -> ShortestPathTree:
    n = net.n_nodes
    cost_list = list(map(float, costs))
    dist = [float("inf")] * n
    pred = [-1] * n
    dist[origin] = 0.0
    heap: list[tuple[float, int]] = [(0.0, origin)]
    adj = net._adj
    done = [False] * n
    while heap:
        du, u = heapq.heappop(heap)
        if done[u]:
            continue
        if du > dist[u]:
            continue
        done[u] = True
        for eid, v in adj[u]:
            nd = du + cost_list[eid]
            if nd < dist[v]:
                dist[v] = nd
                pred[v] = eid
                heapq.heappush(heap, (nd, v))
            elif nd == dist[v] and pred[v] != -1 and eid < pred[v]:
                # ties resolved in favor of the smallest edge id
                pred[v] = eid
    return ShortestPathTree(origin, np.array(dist), np.array(pred, dtype=int))


def shortest_paths(net: Network, edge_costs, origin: int) -> ShortestPathTree:
    """Exact one-to-all shortest paths under nonnegative edge costs.

    Raises NetworkError when a destination of an OD pair rooted at ``origin``
    is unreachable.
    """
    edge_costs = np.asarray(edge_costs, dtype=float)
    if edge_costs.shape != (net.n_edges,):
        raise NetworkError(f"expected {net.n_edges} edge costs, got {edge_costs.shape}")
    if np.any(edge_costs < 0) or not np.all(np.isfinite(edge_costs)):
        raise NetworkError("edge costs must be finite and nonnegative")
    if not (0 <= origin < net.n_nodes):
        raise NetworkError(f"unknown origin {origin}")
    tree = _dijkstra(net, edge_costs, origin)
    for o, d in net.od_pairs:
        if o == origin and not np.isfinite(tree.dist[d]):
            raise NetworkError(
                f"destination {net.node_labels[d]} unreachable from origin "
                f"{net.node_labels[o]}"
            )
    return tree


# -- path enumeration --------------------------------------------------------


@dataclass(frozen=True)
class PathSet:
    """Simple paths per OD pair with demand/edge incidence matrices.

    ``lambda_`` is |W| x |P| with one 1 per column (paths belong to exactly
    one OD pair); ``delta`` is |E| x |P| marking edge membership.  ``truncated``
    records whether any OD pair had more simple paths than were kept, which
    matters to consumers that need the complete path set.
    """

    paths: list[tuple[int, ...]]
    od_of_path: list[int]
    lambda_: np.ndarray
    delta: np.ndarray
    truncated: bool

    @property
    def n_paths(self) -> int:
        return len(self.paths)

    def paths_for(self, w: int) -> list[int]:
        return [p for p, ow in enumerate(self.od_of_path) if ow == w]


def _path_nodes(net: Network, path: tuple[int, ...]) -> list[int]:
    nodes = [net.edges[path[0]].tail]
    for eid in path:
        nodes.append(net.edges[eid].head)
    return nodes


def _masked_dijkstra(net, costs, origin, banned_nodes, banned_edges):
    n = net.n_nodes
    dist = [float("inf")] * n
    pred = [-1] * n
    if origin in banned_nodes:
        return dist, pred
    dist[origin] = 0.0
    heap = [(0.0, origin)]
    done = [False] * n
    while heap:
        du, u = heapq.heappop(heap)
        if done[u] or du > dist[u]:
            continue
        done[u] = True
        for eid, v in net._adj[u]:
            if eid in banned_edges or v in banned_nodes:
                continue
            nd = du + costs[eid]
            if nd < dist[v]:
                dist[v] = nd
                pred[v] = eid
                heapq.heappush(heap, (nd, v))
            elif nd == dist[v] and pred[v] != -1 and eid < pred[v]:
                pred[v] = eid
    return dist, pred


def _extract_path(net, pred, origin, dest) -> tuple[int, ...] | None:
    path = []
    node = dest
    while node != origin:
        eid = pred[node]
        if eid == -1:
            return None
        path.append(eid)
        node = net.edges[eid].tail
    return tuple(reversed(path))


def _k_shortest_paths(net: Network, costs, origin, dest, k: int):
    """Yen's algorithm for loopless shortest paths, deterministic ordering."""
    dist, pred = _masked_dijkstra(net, costs, origin, set(), set())
    first = _extract_path(net, pred, origin, dest)
    if first is None:
        return []
    accepted = [first]
    cost_of = lambda p: sum(costs[e] for e in p)
    candidates: list[tuple[float, tuple[int, ...], tuple[int, ...]]] = []
    seen = {first}
    while len(accepted) < k:
        prev = accepted[-1]
        prev_nodes = _path_nodes(net, prev)
        for i in range(len(prev)):
            spur_node = prev_nodes[i]
            root = prev[:i]
            banned_edges = set()
            for p in accepted:
                if p[:i] == root and len(p) > i:
                    banned_edges.add(p[i])
            banned_nodes = set(prev_nodes[:i])
            dist, pred = _masked_dijkstra(net, costs, spur_node, banned_nodes, banned_edges)
            spur = _extract_path(net, pred, spur_node, dest)
            if spur is None:
                continue
            total = root + spur
            if total in seen:
                continue
            seen.add(total)
            heapq.heappush(candidates, (cost_of(total), total, total))
        if not candidates:
            break
        _, _, best = heapq.heappop(candidates)
        accepted.append(best)
    return accepted


def enumerate_paths(net: Network, max_paths_per_od: int) -> PathSet:
    """Simple paths per OD pair in nondecreasing free-flow-time order.

    Each OD pair keeps at most ``max_paths_per_od`` paths; the returned set
    flags whether any pair was truncated.
    """
    if max_paths_per_od < 1:
        raise ValueError("max_paths_per_od must be at least 1")
    costs = [float(t) for t in net.free_flow_times()]
    paths: list[tuple[int, ...]] = []
    od_of_path: list[int] = []
    truncated = False
    for w, (o, d) in enumerate(net.od_pairs):
        found = _k_shortest_paths(net, costs, o, d, max_paths_per_od + 1)
        if not found:
            raise NetworkError(
                f"no directed path for OD pair "
                f"({net.node_labels[o]} -> {net.node_labels[d]})"
            )
        if len(found) > max_paths_per_od:
            truncated = True
            found = found[:max_paths_per_od]
        for p in found:
            paths.append(p)
            od_of_path.append(w)
    lam = np.zeros((net.n_od, len(paths)))
    delta = np.zeros((net.n_edges, len(paths)))
    for j, (p, w) in enumerate(zip(paths, od_of_path)):
        lam[w, j] = 1.0
        for eid in p:
            delta[eid, j] = 1.0
    return PathSet(paths, od_of_path, lam, delta, truncated)


def is_parallel_links(net: Network) -> bool:
    """True when every edge joins the same origin to the same destination."""
    if net.n_od != 1:
        return False
    o, d = net.od_pairs[0]
    return all(e.tail == o and e.head == d for e in net.edges)


# -- TNTP parsing -------------------------------------------------------------


def _strip_tntp(line: str) -> str:
    if "~" in line:
        line = line[: line.index("~")]
    return line.strip()


def _parse_metadata(lines: list[str]) -> tuple[dict, int]:
    meta = {}
    i = 0
    for i, (no, line) in enumerate(lines):
        if line.startswith("<END OF METADATA>"):
            return meta, i + 1
        if line.startswith("<"):
            if ">" not in line:
                raise TNTPParseError("unterminated metadata tag", no)
            tag, _, rest = line.partition(">")
            meta[tag.strip("< ").upper()] = rest.strip()
    return meta, 0 if not meta else i + 1


def parse_tntp(net_text: str, trips_text: str) -> Network:
    """Build a Network from TNTP network and trips file contents.

    Edge rows carry (init, term, capacity, length, free-flow time, b, power,
    speed, toll, type); each row becomes one directed edge with a BPR latency
    (t_f from the free-flow time, capacity from the capacity column, alpha=b,
    beta=power).  Trips are read from ``Origin`` blocks; zero-demand pairs are
    dropped.
    """
    net_lines = [
        (no, _strip_tntp(raw))
        for no, raw in enumerate(net_text.splitlines(), start=1)
    ]
    net_lines = [(no, ln) for no, ln in net_lines if ln]
    meta, start = _parse_metadata(net_lines)
    if "NUMBER OF NODES" not in meta:
        raise TNTPParseError("missing <NUMBER OF NODES> metadata")
    try:
        n_nodes = int(meta["NUMBER OF NODES"])
        n_links = int(meta.get("NUMBER OF LINKS", "-1"))
    except ValueError as exc:
        raise TNTPParseError(f"bad metadata value: {exc}") from None
    if n_nodes <= 0:
        raise TNTPParseError("node count must be positive")

    edges: list[Edge] = []
    for no, line in net_lines[start:]:
        if line.lower().startswith("init") or line.startswith("<"):
            continue  # column header line
        row = line.rstrip(";").split()
        if len(row) < 7:
            raise TNTPParseError(f"edge row needs at least 7 fields, got {len(row)}", no)
        try:
            init, term = int(row[0]), int(row[1])
            capacity, _length, fft = float(row[2]), float(row[3]), float(row[4])
            b, power = float(row[5]), float(row[6])
        except ValueError as exc:
            raise TNTPParseError(f"bad edge field: {exc}", no) from None
        if capacity <= 0:
            raise TNTPParseError(f"nonpositive capacity {capacity}", no)
        if not (1 <= init <= n_nodes) or not (1 <= term <= n_nodes):
            raise TNTPParseError(
                f"edge ({init},{term}) references node outside 1..{n_nodes}", no
            )
        if fft <= 0:
            raise TNTPParseError(f"nonpositive free-flow time {fft}", no)
        edges.append(
            Edge(init - 1, term - 1, BPR(fft, capacity, b, power), capacity=capacity)
        )
    if n_links >= 0 and len(edges) != n_links:
        raise TNTPParseError(
            f"expected {n_links} edge rows per metadata, found {len(edges)}"
        )

    trips_lines = [
        (no, _strip_tntp(raw))
        for no, raw in enumerate(trips_text.splitlines(), start=1)
    ]
    trips_lines = [(no, ln) for no, ln in trips_lines if ln]
    _tmeta, tstart = _parse_metadata(trips_lines)
    od: dict[tuple[int, int], float] = {}
    origin = None
    for no, line in trips_lines[tstart:]:
        if line.lower().startswith("origin"):
            try:
                origin = int(line.split()[1])
            except (IndexError, ValueError):
                raise TNTPParseError("malformed Origin header", no) from None
            continue
        if origin is None:
            raise TNTPParseError("trip entry before any Origin header", no)
        for chunk in line.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            if ":" not in chunk:
                raise TNTPParseError(f"malformed trip entry {chunk!r}", no)
            dst_s, _, amt_s = chunk.partition(":")
            try:
                dst, amt = int(dst_s), float(amt_s)
            except ValueError as exc:
                raise TNTPParseError(f"bad trip entry {chunk!r}: {exc}", no) from None
            if amt < 0:
                raise TNTPParseError(f"negative demand {amt}", no)
            if not (1 <= dst <= n_nodes):
                raise TNTPParseError(f"destination {dst} outside 1..{n_nodes}", no)
            if amt == 0:
                continue  # zero-demand pairs do not enter the OD set
            if dst == origin:
                raise TNTPParseError(f"positive self demand at node {origin}", no)
            od[(origin - 1, dst - 1)] = od.get((origin - 1, dst - 1), 0.0) + amt

    od_pairs = sorted(od)
    demand = np.array([od[p] for p in od_pairs])
    return Network(list(range(1, n_nodes + 1)), edges, od_pairs, demand)


def serialize_tntp(net: Network) -> tuple[str, str]:
    """Render a BPR network back to TNTP text; inverse of ``parse_tntp``."""
    for e in net.edges:
        if not isinstance(e.latency, BPR):
            raise ValueError("only pure-BPR networks serialize to TNTP")
    out = [
        f"<NUMBER OF ZONES> {net.n_nodes}",
        f"<NUMBER OF NODES> {net.n_nodes}",
        "<FIRST THRU NODE> 1",
        f"<NUMBER OF LINKS> {net.n_edges}",
        "<END OF METADATA>",
        "",
        "~ \tInit node \tTerm node \tCapacity \tLength \tFree Flow Time \tB\tPower\tSpeed limit \tToll \tLink Type\t;",
    ]
    for e in net.edges:
        f = e.latency
        out.append(
            f"\t{net.node_labels[e.tail]}\t{net.node_labels[e.head]}\t{f.capacity!r}\t"
            f"{f.t_f!r}\t{f.t_f!r}\t{f.alpha!r}\t{f.beta!r}\t0\t0\t1\t;"
        )
    net_text = "\n".join(out) + "\n"

    by_origin: dict[int, list[tuple[int, float]]] = {}
    for (o, d), q in zip(net.od_pairs, net.demand):
        by_origin.setdefault(o, []).append((d, float(q)))
    tout = [
        f"<NUMBER OF ZONES> {net.n_nodes}",
        f"<TOTAL OD FLOW> {float(net.demand.sum())!r}",
        "<END OF METADATA>",
        "",
    ]
    for o in sorted(by_origin):
        tout.append(f"Origin {net.node_labels[o]}")
        for d, q in sorted(by_origin[o]):
            tout.append(f"    {net.node_labels[d]} : {q!r};")
        tout.append("")
    trips_text = "\n".join(tout) + "\n"
    return net_text, trips_text
