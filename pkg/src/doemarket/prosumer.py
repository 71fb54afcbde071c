"""Prosumer agent: local trading subproblem, consensus updates, censoring.

Each agent owns a parameterized QP that it re-solves every negotiation round
with fresh estimates (peer trades, p2p prices, envelope grant and price).
Battery, grid purchase/sale, bilateral trades and the export-limit ask are
decided jointly; duals of the balance and envelope constraints come back in
the PriceReport.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np


class AgentError(Exception):
    pass


class AgentInfeasible(AgentError):
    """Local problem infeasible, e.g. grant/import limits cannot serve demand."""


class AgentSolverStall(AgentError):
    pass


@dataclass
class LocalEstimates:
    """Everything a prosumer believes about the outside world this round."""

    e_hat: dict           # partner -> ndarray(T), consensus trade estimate
    lam: dict             # partner -> ndarray(T), p2p price estimate
    psi: np.ndarray       # (T,) envelope price received from the allocator
    dso_envelope: np.ndarray  # (T,) allocator-side export limit received
    last_received: dict = field(default_factory=dict)  # partner -> ndarray(T)


def initial_estimates(spec, market, horizon):
    """Round-zero values: zero trades, mid tariff price, generous envelope ask."""
    T = horizon
    e_hat = {j: np.zeros(T) for j in spec.partners}
    lam = {j: (market.fit + market.tou) / 2.0 for j in spec.partners}
    env0 = np.full(T, max(float(np.max(spec.res)) if spec.res.size else 0.0, 0.0))
    return LocalEstimates(
        e_hat=e_hat, lam=lam, psi=np.zeros(T), dso_envelope=env0,
        last_received={j: np.zeros(T) for j in spec.partners},
    )


@dataclass(frozen=True)
class LocalDecision:
    p_buy: np.ndarray       # (T,) purchase from the grid
    p_sell: np.ndarray      # (T,) sale to the grid
    p_batt: np.ndarray      # (T,) net charging power
    soc: np.ndarray         # (T+1,) stored energy, soc[0] = e0
    p2p_total: np.ndarray   # (T,) sum of trades
    injection: np.ndarray   # (T,) net export at the connection point
    export_ask: np.ndarray  # (T,) export-limit ask
    trades: dict            # partner -> ndarray(T), power sold to that partner


@dataclass(frozen=True)
class PriceReport:
    phi: np.ndarray     # (T,) balance dual (supply-minus-demand orientation)
    gamma: np.ndarray   # (T,) export-limit dual, >= 0
    mu: np.ndarray      # (T,) p2p-aggregation dual
    eps: np.ndarray     # (T,) injection-split dual
    surplus: float


class ProsumerAgent:
    """Holds the cached cvxpy problem; solve() re-uses it with new parameters."""

    def __init__(self, spec, market, delta_t=1.0, terminal_soc=True):
        self.spec = spec
        self.market = market
        self.delta_t = float(delta_t)
        T = len(market.fit)
        self.horizon = T
        partners = spec.partners
        nJ = len(partners)
        rho = market.rho

        p_buy = cp.Variable(T, name="p_buy")
        p_sell = cp.Variable(T, name="p_sell")
        p_batt = cp.Variable(T, name="p_batt")
        soc = cp.Variable(T + 1, name="soc")
        p2p = cp.Variable(T, name="p2p")
        inj = cp.Variable(T, name="inj")
        ask = cp.Variable(T, name="ask")
        trades = cp.Variable((nJ, T), name="trades") if nJ else None

        e_hat = cp.Parameter((nJ, T), name="e_hat") if nJ else None
        lam = cp.Parameter((nJ, T), name="lam") if nJ else None
        psi = cp.Parameter(T, name="psi")
        grant = cp.Parameter(T, name="grant")

        dt = self.delta_t
        cost = dt * (market.tou @ p_buy - market.fit @ p_sell)
        if nJ:
            # lam*e_hat is constant within a round and dropped; -lam@e keeps duals intact
            cost += dt * (-cp.sum(cp.multiply(lam, trades))
                          + (rho / 2) * cp.sum_squares(e_hat - trades))
        cost += dt * (-psi @ ask + (rho / 2) * cp.sum_squares(grant - ask))

        balance = p_buy - p_sell == spec.demand - spec.res + p_batt + p2p
        if nJ:
            aggregation = p2p == cp.sum(trades, axis=0)
        else:
            aggregation = p2p == 0
        split = inj == p_sell - p_buy + p2p
        doe = inj <= ask
        imp = inj >= -spec.import_limit
        cons = [
            balance, aggregation, split, doe, imp,
            p_buy >= 0, p_buy <= spec.buy_max,
            p_sell >= 0, p_sell <= spec.sell_max,
            p_batt >= spec.batt_p_min, p_batt <= spec.batt_p_max,
            soc[0] == spec.batt_e0,
            soc[1:] == soc[:-1] + p_batt * dt,
            soc[1:] >= spec.batt_e_min, soc[1:] <= spec.batt_e_max,
        ]
        if terminal_soc:
            cons.append(soc[T] >= spec.batt_e0)

        self._vars = dict(p_buy=p_buy, p_sell=p_sell, p_batt=p_batt, soc=soc,
                          p2p=p2p, inj=inj, ask=ask, trades=trades)
        self._params = dict(e_hat=e_hat, lam=lam, psi=psi, grant=grant)
        self._duals = dict(balance=balance, aggregation=aggregation, split=split, doe=doe)
        self.partners = partners
        self.problem = cp.Problem(cp.Minimize(cost), cons)

    def solve(self, est, tol=None):
        T = self.horizon
        nJ = len(self.partners)
        if nJ:
            self._params["e_hat"].value = np.array([est.e_hat[j] for j in self.partners])
            self._params["lam"].value = np.array([est.lam[j] for j in self.partners])
        self._params["psi"].value = np.asarray(est.psi, dtype=float)
        self._params["grant"].value = np.asarray(est.dso_envelope, dtype=float)

        tol = tol if tol is not None else self.market.solver_tol
        try:
            self.problem.solve(solver=cp.CLARABEL, tol_gap_abs=tol, tol_gap_rel=tol,
                               tol_feas=tol, max_iter=200_000)
        except cp.error.SolverError as exc:
            raise AgentSolverStall(f"prosumer {self.spec.node}: {exc}")
        if self.problem.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            raise AgentInfeasible(
                f"prosumer {self.spec.node}: local problem infeasible "
                "(check envelope grant against demand and import limit)"
            )
        if self.problem.status != cp.OPTIMAL:
            raise AgentSolverStall(f"prosumer {self.spec.node}: status {self.problem.status}")

        v = self._vars
        trades = {}
        if nJ:
            tv = np.asarray(v["trades"].value).reshape(nJ, T)
            trades = {j: tv[k].copy() for k, j in enumerate(self.partners)}
        decision = LocalDecision(
            p_buy=np.asarray(v["p_buy"].value).reshape(T),
            p_sell=np.asarray(v["p_sell"].value).reshape(T),
            p_batt=np.asarray(v["p_batt"].value).reshape(T),
            soc=np.asarray(v["soc"].value).reshape(T + 1),
            p2p_total=np.asarray(v["p2p"].value).reshape(T),
            injection=np.asarray(v["inj"].value).reshape(T),
            export_ask=np.asarray(v["ask"].value).reshape(T),
            trades=trades,
        )
        # raw duals carry the dt scaling of the objective; normalize to per pu*h
        dt = self.delta_t
        d = self._duals
        report = PriceReport(
            phi=np.asarray(d["balance"].dual_value).reshape(T) / dt,
            gamma=np.asarray(d["doe"].dual_value).reshape(T) / dt,
            mu=np.asarray(d["aggregation"].dual_value).reshape(T) / dt,
            eps=np.asarray(d["split"].dual_value).reshape(T) / dt,
            surplus=surplus(decision, est.lam, self.market, dt),
        )
        return decision, report


def solve_local(spec, est, market, delta_t=1.0, terminal_soc=True):
    """One-shot local solve; the coordinator keeps persistent agents instead."""
    return ProsumerAgent(spec, market, delta_t, terminal_soc).solve(est)


def censor(prev_est, new, alpha, m_k):
    """True when the stacked trade change is large enough to transmit."""
    prev = np.concatenate([np.ravel(v) for v in prev_est]) if isinstance(prev_est, (list, tuple)) \
        else np.ravel(prev_est)
    cur = np.concatenate([np.ravel(v) for v in new]) if isinstance(new, (list, tuple)) \
        else np.ravel(new)
    if prev.shape != cur.shape:
        raise ValueError("censor: estimate and decision shapes differ")
    return float(np.linalg.norm(prev - cur)) - alpha * m_k >= 0.0


def update_estimates(est, own, received, rho):
    """Consensus and price update after a communication round.

    own: partner -> e_ij this round. received: partner -> freshest e_ji known
    (stale last value when the partner censored). Returns a new LocalEstimates;
    psi/grant are untouched here.
    """
    e_hat = {}
    lam = {}
    for j, e_ij in own.items():
        e_ji = received[j]
        e_hat[j] = 0.5 * (e_ij - e_ji)
        lam[j] = est.lam[j] + rho * (e_hat[j] - e_ij)
    return LocalEstimates(
        e_hat=e_hat, lam=lam, psi=est.psi, dso_envelope=est.dso_envelope,
        last_received=dict(received),
    )


def surplus(decision, lam, market, delta_t=1.0):
    """Net benefit of the decision: grid sale revenue minus purchase cost plus
    p2p revenue at the local price estimates."""
    total = float(np.sum(delta_t * (market.fit * decision.p_sell - market.tou * decision.p_buy)))
    for j, e in decision.trades.items():
        total += float(np.sum(delta_t * lam[j] * e))
    return total
