"""Bundled desk-scale cases.

Three instances cover the test surface: a 2-node line whose power flow has a
closed scalar fixed point, a 4-bus feeder small enough for a monolithic
reference solve, a stressed variant of it where unrestricted trading provably
violates the voltage ceiling, and a 15-node chain with prosumers at graduated
depths.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path


def _market(T, fit, tou, pi, rho=1.0, alpha=2.0, scenarios=2,
            chi=1.5e-5, max_iters=1000):
    return {
        "fit": list(fit), "tou": list(tou), "pi": list(pi),
        "rho": rho, "alpha": alpha, "m0": 1.0, "tau_m": 0.9,
        "scenarios": scenarios,
        "thresholds": {"chi_es": chi, "chi_et": chi, "chi_ds": chi, "chi_dt": chi},
        "max_iters": max_iters, "solver_tol": 1e-9,
    }


def _battery(p=0.0, e=0.0, e0=0.0):
    return {"p_min": -p, "p_max": p, "e_min": 0.0, "e_max": e, "e0": e0}


def twonode():
    """Minimal 2-node line with one prosumer; matches the scalar oracle."""
    T = 2
    return {
        "network": {
            "nodes": [0, 1],
            "lines": [{"from": 0, "to": 1, "r": 0.01, "x": 0.01, "s_max": 1.0}],
            "v0": 1.0, "vmin": 0.9, "vmax": 1.1, "delta_t": 1.0,
            "fixed_loads": {"1": {"q": [0.0] * T}},
        },
        "prosumers": [{
            "node": 1,
            "battery": _battery(),
            "demand": [0.1] * T,
            "res": [0.0] * T,
            "p2g": {"buy_max": 1.0, "sell_max": 1.0},
            "partners": [],
            "import_limit": [1.0] * T,
        }],
        "market": _market(T, fit=[0.1] * T, tou=[0.2] * T, pi=[0.5] * T),
    }


def oracle4():
    """4-bus feeder, two trading prosumers, T=4; generous limits so the
    negotiation and the monolithic solve land on the same interior point."""
    T = 4
    return {
        "network": {
            "nodes": [0, 1, 2, 3],
            "lines": [
                {"from": 0, "to": 1, "r": 0.01, "x": 0.01, "s_max": 2.0},
                {"from": 1, "to": 2, "r": 0.01, "x": 0.01, "s_max": 2.0},
                {"from": 2, "to": 3, "r": 0.01, "x": 0.01, "s_max": 2.0},
            ],
            "v0": 1.0, "vmin": 0.9, "vmax": 1.1, "delta_t": 1.0,
            "fixed_loads": {
                "1": {"p": [0.05] * T, "q": [0.02] * T},
                "2": {"q": [0.01] * T},
                "3": {"q": [0.01] * T},
            },
        },
        "prosumers": [
            {
                # net consumer; cannot re-export, so trades stay pinned to demand
                "node": 2,
                "battery": _battery(),
                "demand": [1.00, 0.95, 1.05, 1.10],
                "res": [0.0, 0.0, 0.0, 0.0],
                "p2g": {"buy_max": 3.0, "sell_max": 0.0},
                "partners": [3],
                "import_limit": [3.0] * T,
            },
            {
                # pure generator with a small battery; cannot transit grid power
                "node": 3,
                "battery": _battery(p=0.08, e=0.16, e0=0.0),
                "demand": [0.0, 0.0, 0.0, 0.0],
                "res": [0.75, 0.85, 0.75, 0.70],
                "p2g": {"buy_max": 0.0, "sell_max": 3.0},
                "partners": [2],
                "import_limit": [3.0] * T,
            },
        ],
        "market": _market(
            T,
            fit=[0.40, 0.44, 0.48, 0.38],
            tou=[0.80, 0.88, 0.96, 0.76],
            pi=[0.50, 0.55, 0.60, 0.50],
            rho=0.02,
            chi=1e-9,
        ),
    }


def stressed4():
    """4-bus feeder where unrestricted export provably breaks the voltage
    ceiling; the envelopes must bite to keep the network clean."""
    T = 2
    return {
        "network": {
            "nodes": [0, 1, 2, 3],
            "lines": [
                {"from": 0, "to": 1, "r": 0.05, "x": 0.05, "s_max": 0.9},
                {"from": 1, "to": 2, "r": 0.05, "x": 0.05, "s_max": 0.9},
                {"from": 2, "to": 3, "r": 0.05, "x": 0.05, "s_max": 0.9},
            ],
            "v0": 1.0, "vmin": 0.95, "vmax": 1.05, "delta_t": 1.0,
            "fixed_loads": {
                "1": {"p": [0.02, 0.02], "q": [0.01, 0.01]},
                "2": {"q": [0.01, 0.01]},
                "3": {"q": [0.01, 0.01]},
            },
        },
        "prosumers": [
            {
                # midday surplus, evening demand; battery large enough to
                # absorb whatever envelope cut the allocator imposes
                "node": 2,
                "battery": _battery(p=0.4, e=0.5, e0=0.0),
                "demand": [0.0, 0.30],
                "res": [0.40, 0.0],
                "p2g": {"buy_max": 1.0, "sell_max": 1.0},
                "partners": [3],
                "import_limit": [0.15] * T,
            },
            {
                "node": 3,
                "battery": _battery(p=0.6, e=0.7, e0=0.0),
                "demand": [0.0, 0.0],
                "res": [0.60, 0.0],
                "p2g": {"buy_max": 1.0, "sell_max": 1.0},
                "partners": [2],
                "import_limit": [0.15] * T,
            },
        ],
        "market": _market(
            T,
            fit=[0.30, 0.29], tou=[0.60, 0.58], pi=[1.0, 1.0],
            rho=0.2, chi=1e-8,
        ),
    }


def chain15():
    """15-node chain, prosumers near/mid/far (nodes 2, 7, 12)."""
    T = 2
    nodes = list(range(15))
    lines = [
        {"from": n, "to": n + 1, "r": 0.015, "x": 0.015, "s_max": 1.0}
        for n in range(14)
    ]
    pros_nodes = (2, 7, 12)
    fixed = {}
    for n in nodes[1:]:
        if n in pros_nodes:
            fixed[str(n)] = {"q": [0.005] * T}
        else:
            fixed[str(n)] = {"p": [0.02] * T, "q": [0.005] * T}
    prosumers = []
    for n in pros_nodes:
        partners = [m for m in pros_nodes if m != n]
        prosumers.append({
            "node": n,
            "battery": _battery(p=0.25, e=0.6, e0=0.0),
            "demand": [0.05, 0.10] if n == 2 else [0.0, 0.0],
            "res": [0.40, 0.35],
            "p2g": {"buy_max": 1.0, "sell_max": 1.0},
            "partners": partners,
            "import_limit": [0.02] * T,
        })
    return {
        "network": {
            "nodes": nodes, "lines": lines,
            "v0": 1.0, "vmin": 0.95, "vmax": 1.05, "delta_t": 1.0,
            "fixed_loads": fixed,
        },
        "prosumers": prosumers,
        "market": _market(T, fit=[0.12, 0.13], tou=[0.24, 0.26], pi=[0.8, 0.8],
                          rho=0.2),
    }


BUILTIN = {
    "twonode": twonode,
    "oracle4": oracle4,
    "stressed4": stressed4,
    "chain15": chain15,
}


def builtin_case(name):
    if name not in BUILTIN:
        raise KeyError(f"unknown bundled case {name!r}; have {sorted(BUILTIN)}")
    return copy.deepcopy(BUILTIN[name]())


def write_cases(out_dir):
    """Dump every bundled case as JSON; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, builder in BUILTIN.items():
        path = out / f"{name}.json"
        path.write_text(json.dumps(builder(), indent=2))
        paths.append(path)
    return paths
