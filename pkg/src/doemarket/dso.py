"""Envelope allocator: constrained OPF solve, envelope price update, and the
decomposition of that price into congestion / voltage / energy / loss parts.

The allocator sees only export-limit asks, never trades or device data. Its
price psi is the running multiplier of the ask-equals-allocation agreement;
at agreement psi is <= 0 elementwise and -psi is the marginal network cost of
one more unit of envelope.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import distflow


class SensitivityError(Exception):
    """Finite-difference power flow failed around the operating point."""


@dataclass
class EnvelopeState:
    """Ask/allocation/price triples for every prosumer over the horizon."""

    prosumer_nodes: tuple
    asks: np.ndarray          # (n, T)
    allocations: np.ndarray   # (n, T)
    psi: np.ndarray           # (n, T)
    import_limits: np.ndarray  # (n, T)

    def row(self, node):
        return self.prosumer_nodes.index(node)


@dataclass(frozen=True)
class PriceBreakdown:
    """Per (prosumer, t) components; they sum to -psi up to `residual`."""

    prosumer_nodes: tuple
    congestion_send: np.ndarray
    congestion_recv: np.ndarray
    voltage: np.ndarray
    energy: np.ndarray
    loss: np.ndarray
    residual: np.ndarray

    def component_sum(self):
        return (self.congestion_send + self.congestion_recv + self.voltage
                + self.energy + self.loss)


class DsoAgent:
    """Owns the parameterized cone program; re-solves it per negotiation round."""

    def __init__(self, case, market, prosumer_nodes):
        self.case = case
        self.market = market
        self.prosumer_nodes = tuple(sorted(prosumer_nodes))
        T = case.horizon
        zeros = {n: np.zeros(T) for n in self.prosumer_nodes}
        self.program = distflow.build_socp_opf(
            case, envelope_ask=zeros, psi=zeros, rho=market.rho,
            scenarios=market.scenarios, pi=market.pi,
        )

    def solve(self, asks, psi, tol=None):
        nP = len(self.prosumer_nodes)
        T = self.case.horizon
        self.program.ask.value = np.asarray(asks, dtype=float).reshape(nP, T)
        self.program.psi.value = np.asarray(psi, dtype=float).reshape(nP, T)
        tol = tol if tol is not None else self.market.solver_tol
        return distflow.solve_conic(self.program, tol=tol)


def solve_dso(case, asks, psi, market, tol=None):
    """One-shot allocation solve for {node: ask array} inputs.

    Returns (allocations {node: array}, DsoDuals, flows per scenario).
    """
    agent = DsoAgent(case, market, tuple(asks))
    order = agent.prosumer_nodes
    ask_m = np.array([np.asarray(asks[n], dtype=float) for n in order])
    psi_m = np.array([np.asarray(psi[n], dtype=float) for n in order])
    sol = agent.solve(ask_m, psi_m, tol=tol)
    alloc = {n: sol.alloc[k] for k, n in enumerate(order)}
    return alloc, sol.duals, sol.flows


def update_doe_price(psi, alloc, asks, rho):
    """psi <- psi + rho * (allocation - ask), elementwise."""
    return np.asarray(psi) + rho * (np.asarray(alloc) - np.asarray(asks))


def envelope_sensitivities(case, prosumer_nodes, alloc, scenarios, step=1e-5):
    """Central-difference network sensitivities at every scenario point.

    For each (prosumer i, t, scenario s) returns d(fp, fq, l, v)/d alloc_{i,t},
    evaluated with the exact sweep at injections (s/S)*alloc. Shapes:
    dfp/dfq/dl: (n, T, S, L); dv: (n, T, S, N-1) over non-root nodes.
    """
    order = tuple(prosumer_nodes)
    nP = len(order)
    T = case.horizon
    S = int(scenarios)
    down = [n for n in case.order if n != 0]
    L = len(down)
    alloc = np.asarray(alloc, dtype=float).reshape(nP, T)

    dfp = np.zeros((nP, T, S, L))
    dfq = np.zeros((nP, T, S, L))
    dl = np.zeros((nP, T, S, L))
    dv = np.zeros((nP, T, S, L))

    for s in range(1, S + 1):
        frac = s / S
        for i in range(nP):
            for t in range(T):
                states = []
                for sign in (+1.0, -1.0):
                    pert = alloc.copy()
                    pert[i, t] += sign * step
                    inj = {order[k]: frac * pert[k] for k in range(nP)}
                    p, q = distflow.net_injections(case, inj)
                    try:
                        states.append(distflow.sweep_powerflow(case, p, q))
                    except distflow.PowerFlowError as exc:
                        raise SensitivityError(
                            f"power flow failed perturbing node {order[i]}, t={t}: {exc}"
                        )
                hi, lo = states
                dfp[i, t, s - 1] = (hi.fp[:, t] - lo.fp[:, t]) / (2 * step)
                dfq[i, t, s - 1] = (hi.fq[:, t] - lo.fq[:, t]) / (2 * step)
                dl[i, t, s - 1] = (hi.l[:, t] - lo.l[:, t]) / (2 * step)
                dv[i, t, s - 1] = (hi.v[1:, t] - lo.v[1:, t]) / (2 * step)
    return {"dfp": dfp, "dfq": dfq, "dl": dl, "dv": dv}


def decompose_price(case, prosumer_nodes, alloc, psi, duals, flows, market, sens=None):
    """Split -psi into congestion, voltage, energy and loss components.

    Uses the stationarity of the allocator's Lagrangian in the allocation:
    each component is the matching dual family contracted against the
    finite-difference sensitivities of the exact flow at the scenario points.
    """
    order = tuple(prosumer_nodes)
    nP = len(order)
    T = case.horizon
    S = int(market.scenarios)
    dt = case.delta_t
    pi = np.asarray(market.pi, dtype=float)
    down = [n for n in case.order if n != 0]
    R = np.array([case.lines[case.parent_line[n]].r for n in down])
    X = np.array([case.lines[case.parent_line[n]].x for n in down])
    if sens is None:
        sens = envelope_sensitivities(case, order, alloc, S)
    dfp, dfq, dl, dv = sens["dfp"], sens["dfq"], sens["dl"], sens["dv"]

    cs = np.zeros((nP, T))
    cr = np.zeros((nP, T))
    vo = np.zeros((nP, T))
    en = np.zeros((nP, T))
    lo = np.zeros((nP, T))
    root_kids = [down.index(c) for c in case.children[0]]
    for s in range(S):
        frac = (s + 1) / S
        for t in range(T):
            fp = flows[s].fp[:, t]
            fq = flows[s].fq[:, t]
            lv = flows[s].l[:, t]
            for i in range(nP):
                gfp = dfp[i, t, s]
                gfq = dfq[i, t, s]
                gl = dl[i, t, s]
                gv = dv[i, t, s]
                cs[i, t] += duals.eta[:, t, s] @ (2 * (fp * gfp + fq * gfq))
                cr[i, t] += duals.delta[:, t, s] @ (
                    2 * ((fp - R * lv) * (gfp - R * gl) + (fq - X * lv) * (gfq - X * gl))
                )
                vo[i, t] += (duals.tau_hi[:, t, s] - duals.tau_lo[:, t, s]) @ gv
                # root balance duals are zero at any optimum (p0, q0 are free);
                # kept so the printed breakdown carries the family explicitly
                en[i, t] += duals.omega_p[t, s] * float(np.sum(gfp[root_kids])) \
                    + duals.omega_q[t, s] * float(np.sum(gfq[root_kids]))
                lo[i, t] += (dt * pi[t] / S) * float(R @ gl)

    psi = np.asarray(psi, dtype=float).reshape(nP, T)
    total = cs + cr + vo + en + lo
    residual = np.abs(total / dt + psi)
    return PriceBreakdown(
        prosumer_nodes=order,
        congestion_send=cs / dt, congestion_recv=cr / dt, voltage=vo / dt,
        energy=en / dt, loss=lo / dt, residual=residual,
    )


def dso_cost(case, prosumer_nodes, alloc, scenarios, pi, delta_t=None):
    """Scenario-averaged loss cost of an allocation, via exact sweeps."""
    order = tuple(prosumer_nodes)
    nP = len(order)
    alloc = np.asarray(alloc, dtype=float).reshape(nP, case.horizon)
    dt = case.delta_t if delta_t is None else delta_t
    S = int(scenarios)
    total = 0.0
    for s in range(1, S + 1):
        inj = {order[k]: (s / S) * alloc[k] for k in range(nP)}
        p, q = distflow.net_injections(case, inj)
        sol = distflow.sweep_powerflow(case, p, q)
        total += distflow.loss_cost(sol, pi, dt)
    return total / S
