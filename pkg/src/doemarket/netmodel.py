"""Case model: radial distribution network, prosumer fleet, market parameters.

Everything here is loaded once from a JSON case document, validated, and then
treated as immutable. Per-unit system throughout; money in abstract currency
units per pu*h. Sign convention used across the whole package: positive
prosumer injection means export into the network, fixed loads are
consumption-positive withdrawals.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np


class CaseError(Exception):
    """Base class for case loading/validation failures."""


class SchemaError(CaseError):
    """Missing or ill-typed field in the case document."""


class TopologyError(CaseError):
    """Network is not a tree rooted at node 0."""


class BoundsError(CaseError):
    """A numeric invariant is violated."""


class DuplicateProsumerError(CaseError):
    """More than one prosumer bound to the same node."""


class UnknownNodeError(CaseError):
    """Reference to a node id that is not part of the network."""


@dataclass(frozen=True)
class Line:
    index: int
    from_node: int
    to_node: int
    r: float
    x: float
    s_max: float


@dataclass(frozen=True)
class NetworkCase:
    """Radial network with fixed loads over the horizon.

    Derived topology fields (parent maps, traversal order) are computed by the
    loader so queries never re-walk the graph.
    """

    nodes: tuple
    lines: tuple
    v0: float
    vmin: float
    vmax: float
    fixed_p: dict          # node -> ndarray(T), consumption-positive, 0 at prosumer nodes
    fixed_q: dict          # node -> ndarray(T), all non-root nodes
    horizon: int
    delta_t: float
    parent: dict = field(repr=False, default_factory=dict)        # node -> parent node
    parent_line: dict = field(repr=False, default_factory=dict)   # node -> line index
    children: dict = field(repr=False, default_factory=dict)      # node -> tuple of child nodes
    order: tuple = field(repr=False, default=())                  # nodes, root first, parents before children

    @property
    def node_index(self):
        return {n: i for i, n in enumerate(self.nodes)}

    def line_between(self, a, b):
        for ln in self.lines:
            if {ln.from_node, ln.to_node} == {a, b}:
                return ln
        raise UnknownNodeError(f"no line between {a} and {b}")


@dataclass(frozen=True)
class ProsumerSpec:
    node: int
    batt_p_min: float
    batt_p_max: float
    batt_e_min: float
    batt_e_max: float
    batt_e0: float
    demand: np.ndarray
    res: np.ndarray
    buy_max: float
    sell_max: float
    partners: tuple
    import_limit: np.ndarray


@dataclass(frozen=True)
class MarketParams:
    fit: np.ndarray
    tou: np.ndarray
    pi: np.ndarray
    rho: float
    alpha: float
    m0: float
    tau_m: float
    scenarios: int
    chi_es: float
    chi_et: float
    chi_ds: float
    chi_dt: float
    max_iters: int
    solver_tol: float


def _req(doc, key, kind, where):
    if key not in doc:
        raise SchemaError(f"{where}: missing key '{key}'")
    val = doc[key]
    if kind is float:
        if not isinstance(val, (int, float)) or isinstance(val, bool):
            raise SchemaError(f"{where}.{key}: expected a number, got {type(val).__name__}")
        return float(val)
    if kind is int:
        if not isinstance(val, int) or isinstance(val, bool):
            raise SchemaError(f"{where}.{key}: expected an integer, got {type(val).__name__}")
        return val
    if not isinstance(val, kind):
        raise SchemaError(f"{where}.{key}: expected {kind.__name__}, got {type(val).__name__}")
    return val


def _series(doc, key, horizon, where, required=True):
    if key not in doc:
        if required:
            raise SchemaError(f"{where}: missing per-period array '{key}'")
        return np.zeros(horizon)
    val = doc[key]
    if not isinstance(val, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in val):
        raise SchemaError(f"{where}.{key}: expected a list of numbers")
    if len(val) != horizon:
        raise SchemaError(f"{where}.{key}: length {len(val)} != horizon {horizon} (no broadcasting)")
    return np.asarray(val, dtype=float)


def _build_topology(nodes, lines):
    """BFS from the root; raises TopologyError unless the graph is a tree on node 0."""
    if 0 not in nodes:
        raise TopologyError("root node 0 is missing")
    if len(lines) != len(nodes) - 1:
        raise TopologyError(f"{len(lines)} lines for {len(nodes)} nodes; a tree needs exactly n-1")
    adj = {n: [] for n in nodes}
    for ln in lines:
        for end in (ln.from_node, ln.to_node):
            if end not in adj:
                raise UnknownNodeError(f"line {ln.index} references unknown node {end}")
        adj[ln.from_node].append((ln.to_node, ln.index))
        adj[ln.to_node].append((ln.from_node, ln.index))
    parent, parent_line = {}, {}
    order = [0]
    seen = {0}
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for v, li in adj[u]:
            if v in seen:
                if parent.get(u) != v:
                    raise TopologyError(f"cycle detected through line {li}")
                continue
            seen.add(v)
            parent[v] = u
            parent_line[v] = li
            order.append(v)
            queue.append(v)
    if len(seen) != len(nodes):
        raise TopologyError(f"network is disconnected: reached {len(seen)} of {len(nodes)} nodes")
    children = {n: tuple(v for v in parent if parent[v] == n) for n in nodes}
    return parent, parent_line, children, tuple(order)


def load_case(source):
    """Parse and validate a case document.

    `source` may be a mapping (already-parsed JSON) or a filesystem path to a
    JSON file. Returns (NetworkCase, [ProsumerSpec], MarketParams).
    """
    if isinstance(source, Mapping):
        doc = source
    else:
        path = Path(source)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise SchemaError(f"case file not found: {path}")
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON ({exc})")

    for key in ("network", "prosumers", "market"):
        if key not in doc:
            raise SchemaError(f"top level: missing key '{key}'")
    net, pros_docs, mkt = doc["network"], doc["prosumers"], doc["market"]
    if not isinstance(pros_docs, list):
        raise SchemaError("prosumers: expected a list")

    # horizon is pinned by the market price arrays; every other series must match
    fit_raw = _req(mkt, "fit", list, "market")
    horizon = len(fit_raw)
    if horizon == 0:
        raise SchemaError("market.fit: horizon must be >= 1")

    thr = _req(mkt, "thresholds", dict, "market")
    market = MarketParams(
        fit=_series(mkt, "fit", horizon, "market"),
        tou=_series(mkt, "tou", horizon, "market"),
        pi=_series(mkt, "pi", horizon, "market"),
        rho=_req(mkt, "rho", float, "market"),
        alpha=_req(mkt, "alpha", float, "market"),
        m0=_req(mkt, "m0", float, "market"),
        tau_m=_req(mkt, "tau_m", float, "market"),
        scenarios=_req(mkt, "scenarios", int, "market"),
        chi_es=_req(thr, "chi_es", float, "market.thresholds"),
        chi_et=_req(thr, "chi_et", float, "market.thresholds"),
        chi_ds=_req(thr, "chi_ds", float, "market.thresholds"),
        chi_dt=_req(thr, "chi_dt", float, "market.thresholds"),
        max_iters=_req(mkt, "max_iters", int, "market"),
        solver_tol=_req(mkt, "solver_tol", float, "market"),
    )
    if np.any(market.fit > market.tou):
        raise BoundsError("market: fit must not exceed tou in any period")
    if market.rho <= 0:
        raise BoundsError("market.rho must be > 0")
    if market.scenarios < 1:
        raise BoundsError("market.scenarios must be >= 1")
    for name in ("chi_es", "chi_et", "chi_ds", "chi_dt"):
        if getattr(market, name) <= 0:
            raise BoundsError(f"market.thresholds.{name} must be > 0")
    if market.alpha < 0:
        raise BoundsError("market.alpha must be >= 0")
    if not (0.0 < market.tau_m < 1.0):
        raise BoundsError("market.tau_m must lie in (0, 1)")
    if market.m0 <= 0:
        raise BoundsError("market.m0 must be > 0")
    if market.max_iters < 1:
        raise BoundsError("market.max_iters must be >= 1")

    node_list = _req(net, "nodes", list, "network")
    if not all(isinstance(n, int) and not isinstance(n, bool) for n in node_list):
        raise SchemaError("network.nodes: expected a list of integers")
    if len(set(node_list)) != len(node_list):
        raise SchemaError("network.nodes: duplicate node ids")
    nodes = tuple(node_list)

    lines = []
    for k, ld in enumerate(_req(net, "lines", list, "network")):
        if not isinstance(ld, dict):
            raise SchemaError(f"network.lines[{k}]: expected an object")
        lines.append(Line(
            index=k,
            from_node=_req(ld, "from", int, f"network.lines[{k}]"),
            to_node=_req(ld, "to", int, f"network.lines[{k}]"),
            r=_req(ld, "r", float, f"network.lines[{k}]"),
            x=_req(ld, "x", float, f"network.lines[{k}]"),
            s_max=_req(ld, "s_max", float, f"network.lines[{k}]"),
        ))
    for ln in lines:
        if ln.r < 0 or ln.x < 0:
            raise BoundsError(f"line {ln.index}: r and x must be >= 0")
        if ln.s_max <= 0:
            raise BoundsError(f"line {ln.index}: s_max must be > 0")

    parent, parent_line, children, order = _build_topology(nodes, lines)

    v0 = _req(net, "v0", float, "network")
    vmin = _req(net, "vmin", float, "network")
    vmax = _req(net, "vmax", float, "network")
    if not (0.0 < vmin < vmax):
        raise BoundsError(f"voltage bounds: need 0 < vmin < vmax, got [{vmin}, {vmax}]")
    if not (vmin <= v0 <= vmax):
        raise BoundsError(f"v0={v0} outside [{vmin}, {vmax}]")
    delta_t = float(net.get("delta_t", 1.0))
    if delta_t <= 0:
        raise BoundsError("network.delta_t must be > 0")

    prosumer_nodes = [
        _req(pd, "node", int, f"prosumers[{k}]") for k, pd in enumerate(pros_docs)
    ]
    dupes = {n for n in prosumer_nodes if prosumer_nodes.count(n) > 1}
    if dupes:
        raise DuplicateProsumerError(f"nodes with more than one prosumer: {sorted(dupes)}")
    for n in prosumer_nodes:
        if n not in parent:
            raise UnknownNodeError(f"prosumer node {n} not in network (or is the root)")

    loads_doc = _req(net, "fixed_loads", dict, "network")
    fixed_p, fixed_q = {}, {}
    for n in nodes:
        if n == 0:
            continue
        entry = loads_doc.get(str(n), loads_doc.get(n))
        if entry is None:
            raise SchemaError(f"network.fixed_loads: missing entry for node {n}")
        fixed_q[n] = _series(entry, "q", horizon, f"fixed_loads[{n}]")
        if n in prosumer_nodes:
            p = _series(entry, "p", horizon, f"fixed_loads[{n}]", required=False)
            if np.any(p != 0.0):
                raise BoundsError(
                    f"fixed_loads[{n}]: prosumer node must not carry a fixed active load"
                )
            fixed_p[n] = p
        else:
            fixed_p[n] = _series(entry, "p", horizon, f"fixed_loads[{n}]")
    for key in loads_doc:
        if int(key) not in nodes or int(key) == 0:
            raise UnknownNodeError(f"fixed_loads references unknown or root node {key}")

    case = NetworkCase(
        nodes=nodes, lines=tuple(lines), v0=v0, vmin=vmin, vmax=vmax,
        fixed_p=fixed_p, fixed_q=fixed_q, horizon=horizon, delta_t=delta_t,
        parent=parent, parent_line=parent_line, children=children, order=order,
    )

    prosumers = []
    for k, pd in enumerate(pros_docs):
        where = f"prosumers[{k}]"
        batt = _req(pd, "battery", dict, where)
        p2g = _req(pd, "p2g", dict, where)
        spec = ProsumerSpec(
            node=prosumer_nodes[k],
            batt_p_min=_req(batt, "p_min", float, f"{where}.battery"),
            batt_p_max=_req(batt, "p_max", float, f"{where}.battery"),
            batt_e_min=_req(batt, "e_min", float, f"{where}.battery"),
            batt_e_max=_req(batt, "e_max", float, f"{where}.battery"),
            batt_e0=_req(batt, "e0", float, f"{where}.battery"),
            demand=_series(pd, "demand", horizon, where),
            res=_series(pd, "res", horizon, where),
            buy_max=_req(p2g, "buy_max", float, f"{where}.p2g"),
            sell_max=_req(p2g, "sell_max", float, f"{where}.p2g"),
            partners=tuple(sorted(_req(pd, "partners", list, where))),
            import_limit=_series(pd, "import_limit", horizon, where),
        )
        if not (spec.batt_p_min <= 0.0 <= spec.batt_p_max):
            raise BoundsError(f"{where}: battery power range must contain 0")
        if not (spec.batt_e_min <= spec.batt_e0 <= spec.batt_e_max):
            raise BoundsError(f"{where}: initial SoC outside energy bounds")
        if np.any(spec.demand < 0) or np.any(spec.res < 0):
            raise BoundsError(f"{where}: forecasts must be nonnegative")
        if np.any(spec.import_limit < 0):
            raise BoundsError(f"{where}: import_limit must be >= 0")
        if spec.buy_max < 0 or spec.sell_max < 0:
            raise BoundsError(f"{where}: p2g limits must be >= 0")
        prosumers.append(spec)

    by_node = {p.node: p for p in prosumers}
    for p in prosumers:
        for j in p.partners:
            if j == p.node:
                raise BoundsError(f"prosumer {p.node}: cannot partner with itself")
            if j not in by_node:
                raise UnknownNodeError(f"prosumer {p.node}: partner {j} is not a prosumer")
            if p.node not in by_node[j].partners:
                raise BoundsError(
                    f"partner sets are asymmetric: {j} in N_{p.node} but {p.node} not in N_{j}"
                )

    return case, prosumers, market


def serialize_case(case, prosumers, market):
    """Inverse of load_case: emit a JSON-ready document (round-trips exactly)."""
    return {
        "network": {
            "nodes": list(case.nodes),
            "lines": [
                {"from": ln.from_node, "to": ln.to_node, "r": ln.r, "x": ln.x, "s_max": ln.s_max}
                for ln in case.lines
            ],
            "v0": case.v0,
            "vmin": case.vmin,
            "vmax": case.vmax,
            "delta_t": case.delta_t,
            "fixed_loads": {
                str(n): {"p": list(case.fixed_p[n]), "q": list(case.fixed_q[n])}
                for n in case.nodes if n != 0
            },
        },
        "prosumers": [
            {
                "node": p.node,
                "battery": {
                    "p_min": p.batt_p_min, "p_max": p.batt_p_max,
                    "e_min": p.batt_e_min, "e_max": p.batt_e_max, "e0": p.batt_e0,
                },
                "demand": list(p.demand),
                "res": list(p.res),
                "p2g": {"buy_max": p.buy_max, "sell_max": p.sell_max},
                "partners": list(p.partners),
                "import_limit": list(p.import_limit),
            }
            for p in prosumers
        ],
        "market": {
            "fit": list(market.fit),
            "tou": list(market.tou),
            "pi": list(market.pi),
            "rho": market.rho,
            "alpha": market.alpha,
            "m0": market.m0,
            "tau_m": market.tau_m,
            "scenarios": market.scenarios,
            "thresholds": {
                "chi_es": market.chi_es, "chi_et": market.chi_et,
                "chi_ds": market.chi_ds, "chi_dt": market.chi_dt,
            },
            "max_iters": market.max_iters,
            "solver_tol": market.solver_tol,
        },
    }


def case_digest(case, prosumers, market):
    """Stable hash of the full configuration, for run manifests."""
    text = json.dumps(serialize_case(case, prosumers, market), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def path_to_root(case, node):
    """Line indices from `node` up to the root; empty for the root itself."""
    if node not in case.node_index:
        raise UnknownNodeError(f"unknown node {node}")
    path = []
    while node != 0:
        path.append(case.parent_line[node])
        node = case.parent[node]
    return path
