"""Synchronous market-clearing loop, simulated message bus, convergence tests,
and the monolithic reference solve used to verify the negotiation outcome.

One iteration: all prosumers solve locally (conceptually in parallel), the
censoring rule decides which trade messages go out, everyone updates their
consensus estimates (stale values stand in for censored partners), the
allocator runs its OPF on the fresh asks, updates the envelope price and
broadcasts. Messages never cross the privacy line: trade offers stay between
prosumers, the allocator sees asks only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from . import distflow
from .prosumer import ProsumerAgent, initial_estimates, censor, update_estimates
from .dso import DsoAgent, EnvelopeState, decompose_price, dso_cost, update_doe_price


class ClearingError(Exception):
    pass


class MaxItersExceeded(ClearingError):
    """Raised only when callers ask for strict mode; run_clearing returns a
    flagged partial result instead."""


@dataclass(frozen=True)
class TradeOffer:
    sender: int
    recipient: int
    iteration: int
    trades: np.ndarray      # (T,) power sold sender -> recipient


@dataclass(frozen=True)
class EnvelopeAsk:
    sender: int
    iteration: int
    ask: np.ndarray         # (T,)


@dataclass(frozen=True)
class EnvelopeGrant:
    recipient: int
    iteration: int
    allocation: np.ndarray  # (T,)
    psi: np.ndarray         # (T,)


@dataclass
class IterationTrace:
    r_trade_recip: list = field(default_factory=list)   # sum (e_ij + e_ji)^2
    r_trade_step: list = field(default_factory=list)    # sum (e^k - e^{k-1})^2
    r_env_gap: list = field(default_factory=list)       # sum (alloc - ask)^2
    r_env_step: list = field(default_factory=list)      # sum (alloc^k - alloc^{k-1})^2
    messages_sent: list = field(default_factory=list)
    messages_censored: list = field(default_factory=list)
    exactness: list = field(default_factory=list)       # max cone gap of the round's OPF
    solve_status: list = field(default_factory=list)

    def iterations(self):
        return len(self.r_trade_recip)


@dataclass
class ClearingResult:
    mode: str
    converged: bool
    iterations: int
    decisions: dict           # node -> LocalDecision
    reports: dict             # node -> PriceReport
    estimates: dict           # node -> LocalEstimates (final)
    envelope: EnvelopeState
    dso_duals: object
    dso_flows: tuple
    breakdown: object         # PriceBreakdown or None
    trace: IterationTrace
    integrity: dict
    surpluses: dict           # node -> float
    objective: float
    message_log: tuple        # every message delivered, for audits
    trade_rows: tuple         # per-iteration (iter, i, j, t, e, e_hat, lam, sent)
    doe_rows: tuple           # per-iteration (iter, i, t, ask, allocation, psi)


def adaptive_threshold(k, m0, tau_m):
    """Geometric censoring threshold m_k = m0 * tau_m^k."""
    return m0 * tau_m ** k


def check_convergence(residuals, market):
    """True when all four latest residuals sit below their thresholds."""
    r_es, r_et, r_ds, r_dt = residuals
    return (r_es <= market.chi_es and r_et <= market.chi_et
            and r_ds <= market.chi_ds and r_dt <= market.chi_dt)


def integrity_check(case, prosumer_inj, tol=1e-4):
    """Run the exact sweep at the given prosumer injections and count limit hits."""
    p, q = distflow.net_injections(case, prosumer_inj)
    sol = distflow.sweep_powerflow(case, p, q)
    v_viol = int(np.sum((sol.v < case.vmin - tol) | (sol.v > case.vmax + tol)))
    send_sq = sol.fp ** 2 + sol.fq ** 2
    recv_sq = (sol.fp - sol.line_r[:, None] * sol.l) ** 2 \
        + (sol.fq - sol.line_x[:, None] * sol.l) ** 2
    cap = (sol.line_s[:, None] ** 2)
    line_viol = int(np.sum((send_sq > cap + 2 * tol) | (recv_sq > cap + 2 * tol)))
    loss_energy = float(np.sum(sol.line_r @ sol.l) * case.delta_t)
    return {
        "voltage_violations": v_viol,
        "line_overloads": line_viol,
        "total_loss_energy": loss_energy,
        "solution": sol,
    }


def sample_envelope_integrity(case, envelope, n_samples=100, seed=0, tol=1e-4):
    """Check random injection points dominated by the envelopes stay feasible."""
    rng = np.random.default_rng(seed)
    nodes = envelope.prosumer_nodes
    lo = -envelope.import_limits
    hi = envelope.allocations
    bad = 0
    for _ in range(n_samples):
        draw = lo + rng.random(hi.shape) * np.maximum(hi - lo, 0.0)
        inj = {n: draw[k] for k, n in enumerate(nodes)}
        rep = integrity_check(case, inj, tol=tol)
        bad += rep["voltage_violations"] + rep["line_overloads"]
    return bad


def clearing_objective(case, decisions, market, envelope):
    """System cost of the final decisions: grid trading cost plus the
    scenario-averaged loss cost of the granted envelopes."""
    dt = case.delta_t
    grid = 0.0
    for dec in decisions.values():
        grid += float(np.sum(dt * (market.tou * dec.p_buy - market.fit * dec.p_sell)))
    loss = dso_cost(case, envelope.prosumer_nodes, envelope.allocations,
                    market.scenarios, market.pi, dt)
    return grid + loss


def run_clearing(case, prosumers, market, mode="admm", doe_on=True,
                 terminal_soc=True, max_iters=None, with_breakdown=True,
                 collect_rows=True):
    """Run the full negotiation until both loops converge or the budget ends.

    mode "admm" disables censoring (alpha treated as 0); "coca" uses the
    market's alpha/m0/tau_m schedule. doe_on=False pins the allocator to a
    huge constant grant with zero price, which removes the envelope feedback
    while keeping the identical code path.
    """
    if mode not in ("admm", "coca"):
        raise ValueError(f"unknown mode {mode!r}")
    alpha = market.alpha if mode == "coca" else 0.0
    max_iters = market.max_iters if max_iters is None else max_iters
    T = case.horizon
    specs = {p.node: p for p in prosumers}
    order = sorted(specs)
    nP = len(order)

    agents = {i: ProsumerAgent(specs[i], market, case.delta_t, terminal_soc) for i in order}
    estimates = {i: initial_estimates(specs[i], market, T) for i in order}
    dso = DsoAgent(case, market, order) if doe_on else None

    huge = 1e3
    psi = np.zeros((nP, T))
    alloc = np.full((nP, T), huge) if not doe_on else \
        np.array([estimates[i].dso_envelope for i in order])
    if not doe_on:
        for i in order:
            estimates[i].dso_envelope = np.full(T, huge)

    prev_trades = {i: {j: np.zeros(T) for j in specs[i].partners} for i in order}
    prev_alloc = alloc.copy()
    trace = IterationTrace()
    message_log = []
    trade_rows = []
    doe_rows = []
    decisions = {}
    reports = {}
    converged = False
    dso_sol = None

    for k in range(max_iters):
        # --- prosumer block (independent local solves) ---
        for i in order:
            decisions[i], reports[i] = agents[i].solve(estimates[i])
        trace.solve_status.append("ok")

        # --- censoring and trade messaging ---
        m_k = adaptive_threshold(k, market.m0, market.tau_m)
        sent = 0
        censored = 0
        outgoing = {}
        for i in order:
            partners = specs[i].partners
            if not partners:
                continue
            prev_vec = [estimates[i].e_hat[j] for j in partners]
            new_vec = [decisions[i].trades[j] for j in partners]
            if censor(prev_vec, new_vec, alpha, m_k):
                outgoing[i] = True
                sent += len(partners)
            else:
                outgoing[i] = False
                censored += len(partners)
        inboxes = {i: {} for i in order}
        for i in order:
            if outgoing.get(i):
                for j in specs[i].partners:
                    msg = TradeOffer(sender=i, recipient=j, iteration=k,
                                     trades=decisions[i].trades[j].copy())
                    message_log.append(msg)
                    inboxes[j][i] = msg.trades

        # --- consensus/price updates (stale values when censored) ---
        for i in order:
            received = {}
            for j in specs[i].partners:
                if j in inboxes[i]:
                    received[j] = inboxes[i][j]
                else:
                    received[j] = estimates[i].last_received[j]
            estimates[i] = update_estimates(
                estimates[i], decisions[i].trades, received, market.rho)

        # --- envelope loop: asks in, allocation and price out ---
        asks = np.array([decisions[i].export_ask for i in order])
        for i in order:
            message_log.append(EnvelopeAsk(sender=i, iteration=k,
                                           ask=decisions[i].export_ask.copy()))
        if doe_on:
            dso_sol = dso.solve(asks, psi)
            alloc = dso_sol.alloc
            psi = update_doe_price(psi, alloc, asks, market.rho)
            trace.exactness.append(
                max(distflow.check_exactness(f) for f in dso_sol.flows))
        else:
            trace.exactness.append(0.0)
        # doe_on=False keeps alloc at the huge constant and psi at zero
        for idx, i in enumerate(order):
            grant = EnvelopeGrant(recipient=i, iteration=k,
                                  allocation=alloc[idx].copy(), psi=psi[idx].copy())
            message_log.append(grant)
            estimates[i].dso_envelope = grant.allocation
            estimates[i].psi = grant.psi

        # --- residuals and bookkeeping ---
        r_es = sum(
            float(np.sum((decisions[i].trades[j] + decisions[j].trades[i]) ** 2))
            for i in order for j in specs[i].partners
        )
        r_et = sum(
            float(np.sum((decisions[i].trades[j] - prev_trades[i][j]) ** 2))
            for i in order for j in specs[i].partners
        )
        r_ds = float(np.sum((alloc - asks) ** 2))
        r_dt = float(np.sum((alloc - prev_alloc) ** 2))
        trace.r_trade_recip.append(r_es)
        trace.r_trade_step.append(r_et)
        trace.r_env_gap.append(r_ds)
        trace.r_env_step.append(r_dt)
        trace.messages_sent.append(sent)
        trace.messages_censored.append(censored)

        if collect_rows:
            for i in order:
                for j in specs[i].partners:
                    for t in range(T):
                        trade_rows.append((
                            k, i, j, t,
                            decisions[i].trades[j][t],
                            estimates[i].e_hat[j][t],
                            estimates[i].lam[j][t],
                            int(bool(outgoing.get(i))),
                        ))
            for idx, i in enumerate(order):
                for t in range(T):
                    doe_rows.append((k, i, t, asks[idx, t], alloc[idx, t], psi[idx, t]))

        prev_trades = {i: {j: decisions[i].trades[j].copy() for j in specs[i].partners}
                       for i in order}
        prev_alloc = alloc.copy()

        if k >= 1 and check_convergence((r_es, r_et, r_ds, r_dt), market):
            converged = True
            break

    envelope = EnvelopeState(
        prosumer_nodes=tuple(order),
        asks=np.array([decisions[i].export_ask for i in order]),
        allocations=alloc.copy(),
        psi=psi.copy(),
        import_limits=np.array([specs[i].import_limit for i in order]),
    )

    final_inj = {i: decisions[i].injection for i in order}
    integrity = integrity_check(case, final_inj)
    integrity.pop("solution")

    breakdown = None
    if with_breakdown and doe_on and dso_sol is not None:
        breakdown = decompose_price(case, tuple(order), alloc, psi,
                                    dso_sol.duals, dso_sol.flows, market)

    surpluses = {i: reports[i].surplus for i in order}
    objective = clearing_objective(case, decisions, market, envelope) if doe_on else \
        clearing_objective_no_envelope(case, decisions, market, order)

    return ClearingResult(
        mode=mode, converged=converged, iterations=trace.iterations(),
        decisions=decisions, reports=reports, estimates=estimates,
        envelope=envelope,
        dso_duals=dso_sol.duals if dso_sol is not None else None,
        dso_flows=dso_sol.flows if dso_sol is not None else (),
        breakdown=breakdown, trace=trace, integrity=integrity,
        surpluses=surpluses, objective=objective,
        message_log=tuple(message_log), trade_rows=tuple(trade_rows),
        doe_rows=tuple(doe_rows),
    )


def clearing_objective_no_envelope(case, decisions, market, order):
    """Grid-cost plus loss cost at the realized injections (envelope-free runs)."""
    dt = case.delta_t
    grid = sum(
        float(np.sum(dt * (market.tou * decisions[i].p_buy - market.fit * decisions[i].p_sell)))
        for i in order
    )
    inj = {i: decisions[i].injection for i in order}
    p, q = distflow.net_injections(case, inj)
    sol = distflow.sweep_powerflow(case, p, q)
    return grid + distflow.loss_cost(sol, market.pi, dt)


@dataclass(frozen=True)
class CentralSolution:
    objective: float
    envelopes: np.ndarray     # (n, T)
    trades: dict              # (i, j) -> ndarray(T)
    decisions: dict           # node -> dict of arrays
    doe_duals: np.ndarray     # (n, T) multiplier of the export-limit constraint
    flows: tuple


def solve_centralized_oracle(case, prosumers, market, terminal_soc=True, tol=None):
    """Monolithic solve over all prosumers and the network with reciprocity
    imposed directly. Desk-scale verification reference for the negotiation."""
    T = case.horizon
    specs = {p.node: p for p in prosumers}
    order = sorted(specs)
    nP = len(order)
    S = market.scenarios
    dt = case.delta_t
    tol = tol if tol is not None else market.solver_tol

    env = cp.Variable((nP, T), name="env")
    pv = {}
    cons = []
    doe_cons = {}
    grid_cost = 0
    pair_vars = {}
    for idx, i in enumerate(order):
        sp = specs[i]
        nJ = len(sp.partners)
        p_buy = cp.Variable(T)
        p_sell = cp.Variable(T)
        p_batt = cp.Variable(T)
        soc = cp.Variable(T + 1)
        p2p = cp.Variable(T)
        inj = cp.Variable(T)
        trades = cp.Variable((nJ, T)) if nJ else None
        pv[i] = dict(p_buy=p_buy, p_sell=p_sell, p_batt=p_batt, soc=soc,
                     p2p=p2p, inj=inj, trades=trades)
        for kj, j in enumerate(sp.partners):
            pair_vars[(i, j)] = trades[kj]
        grid_cost += dt * (market.tou @ p_buy - market.fit @ p_sell)
        doe = inj <= env[idx]
        doe_cons[i] = doe
        cons += [
            p_buy - p_sell == sp.demand - sp.res + p_batt + p2p,
            p2p == (cp.sum(trades, axis=0) if nJ else 0),
            inj == p_sell - p_buy + p2p,
            doe, inj >= -sp.import_limit,
            p_buy >= 0, p_buy <= sp.buy_max,
            p_sell >= 0, p_sell <= sp.sell_max,
            p_batt >= sp.batt_p_min, p_batt <= sp.batt_p_max,
            soc[0] == sp.batt_e0,
            soc[1:] == soc[:-1] + p_batt * dt,
            soc[1:] >= sp.batt_e_min, soc[1:] <= sp.batt_e_max,
        ]
        if terminal_soc:
            cons.append(soc[T] >= sp.batt_e0)
    seen = set()
    for (i, j) in list(pair_vars):
        if (j, i) in seen:
            continue
        seen.add((i, j))
        cons.append(pair_vars[(i, j)] == -pair_vars[(j, i)])

    env_dict = {order[idx]: env[idx] for idx in range(nP)}
    net = _network_block(case, env_dict, S, market.pi)
    cons += net["constraints"]
    problem = cp.Problem(cp.Minimize(grid_cost + net["loss_cost"]), cons)
    try:
        problem.solve(solver=cp.CLARABEL, tol_gap_abs=tol, tol_gap_rel=tol,
                      tol_feas=tol, max_iter=200_000)
    except cp.error.SolverError as exc:
        raise distflow.SolverStall(f"central solve failed: {exc}")
    if problem.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        raise distflow.Infeasible("central problem infeasible")
    if problem.status != cp.OPTIMAL:
        raise distflow.SolverStall(f"central solve status {problem.status}")

    trades_out = {}
    for (i, j), var in pair_vars.items():
        trades_out[(i, j)] = np.asarray(var.value).reshape(T)
    decisions = {
        i: {name: np.asarray(var.value).reshape(-1)
            for name, var in pv[i].items() if var is not None and name != "trades"}
        for i in order
    }
    duals = np.array([
        np.asarray(doe_cons[i].dual_value).reshape(T) / dt for i in order
    ])
    return CentralSolution(
        objective=float(problem.value),
        envelopes=np.asarray(env.value).reshape(nP, T),
        trades=trades_out,
        decisions=decisions,
        doe_duals=duals,
        flows=net["state"],
    )


def _network_block(case, env_exprs, scenarios, pi):
    """Scenario-sampled relaxed network constraints over given envelope
    expressions; shared by the monolithic reference solve."""
    T = case.horizon
    S = int(scenarios)
    pi = np.asarray(pi, dtype=float)
    down_nodes = [n for n in case.order if n != 0]
    kpos = {n: k for k, n in enumerate(down_nodes)}
    R = np.array([case.lines[case.parent_line[n]].r for n in down_nodes])
    X = np.array([case.lines[case.parent_line[n]].x for n in down_nodes])
    Smax = np.array([case.lines[case.parent_line[n]].s_max for n in down_nodes])
    L = len(down_nodes)

    cons = []
    loss = 0
    state = []
    for s in range(1, S + 1):
        frac = s / S
        u = cp.Variable((L, T))
        fp = cp.Variable((L, T))
        fq = cp.Variable((L, T))
        lv = cp.Variable((L, T), nonneg=True)
        for k, d in enumerate(down_nodes):
            inj_p = -case.fixed_p[d]
            inj_q = -case.fixed_q[d]
            inj_expr = frac * env_exprs[d] + inj_p if d in env_exprs else cp.Constant(inj_p)
            kids = [kpos[c] for c in case.children[d]]
            cons.append(fp[k] - R[k] * lv[k] + inj_expr
                        == sum((fp[c] for c in kids), cp.Constant(np.zeros(T))))
            cons.append(fq[k] - X[k] * lv[k] + inj_q
                        == sum((fq[c] for c in kids), cp.Constant(np.zeros(T))))
            u_up = (case.v0 ** 2) if case.parent[d] == 0 else u[kpos[case.parent[d]]]
            cons.append(u[k] == u_up - 2 * (R[k] * fp[k] + X[k] * fq[k])
                        + (R[k] ** 2 + X[k] ** 2) * lv[k])
            cons.append(cp.SOC(lv[k] + u_up,
                               cp.vstack([2 * fp[k], 2 * fq[k], lv[k] - u_up]), axis=0))
            cons.append(cp.square(fp[k]) + cp.square(fq[k]) <= Smax[k] ** 2)
            cons.append(cp.square(fp[k] - R[k] * lv[k]) + cp.square(fq[k] - X[k] * lv[k])
                        <= Smax[k] ** 2)
            cons.append(u[k] <= case.vmax ** 2)
            cons.append(u[k] >= case.vmin ** 2)
        loss += cp.sum(cp.multiply(pi * case.delta_t, R @ lv)) / S
        state.append({"u": u, "fp": fp, "fq": fq, "l": lv})
    return {"constraints": cons, "loss_cost": loss, "state": tuple(state)}
