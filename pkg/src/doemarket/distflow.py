"""Branch-flow power flow on radial networks and the conic envelope OPF.

Two routes to the same physics live here on purpose. `sweep_powerflow` is a
plain numpy backward/forward sweep solving the exact branch-flow equations for
fixed injections; it is used to verify everything else. `build_socp_opf` +
`solve_conic` form the relaxed optimization the envelope allocator solves,
with the cone l*v_up^2 >= fp^2 + fq^2 replacing the exact equality.

Line quantities are sending-end (measured at the parent node of each line).
"""

from __future__ import annotations

from dataclasses import dataclass

import cvxpy as cp
import numpy as np


class PowerFlowError(Exception):
    """Base class for power-flow and conic-solve failures."""


class NonConvergence(PowerFlowError):
    """Sweep residual still above tolerance after the sweep budget."""


class VoltageCollapse(PowerFlowError):
    """Squared-voltage iterate became non-positive."""


class Infeasible(PowerFlowError):
    pass


class InfeasibleAskError(Infeasible):
    """Envelope OPF infeasible even before granting any export."""


class Unbounded(PowerFlowError):
    pass


class SolverStall(PowerFlowError):
    """Conic solver stopped short of the requested tolerance."""


@dataclass(frozen=True)
class PowerFlowSolution:
    """Network state over the horizon.

    Self-contained: carries enough topology (parent positions, impedances) to
    evaluate losses and cone gaps without the originating case.
    """

    node_ids: tuple           # row order of v
    v: np.ndarray             # (N, T) voltage magnitudes
    fp: np.ndarray            # (L, T) sending-end active flow
    fq: np.ndarray            # (L, T) sending-end reactive flow
    l: np.ndarray             # (L, T) squared current magnitude
    p0: np.ndarray            # (T,) active power supplied by the grid at the root
    q0: np.ndarray            # (T,) reactive power supplied at the root
    line_up: tuple            # per line: row index of its parent-side node
    line_r: np.ndarray
    line_x: np.ndarray
    line_s: np.ndarray

    def csv_rows(self, scenario=0):
        """Rows (scenario, t, element_type, element_id, quantity, value)."""
        rows = []
        T = self.v.shape[1]
        for t in range(T):
            for i, n in enumerate(self.node_ids):
                rows.append((scenario, t, "node", n, "v", self.v[i, t]))
            for j in range(len(self.line_r)):
                rows.append((scenario, t, "line", j, "fp", self.fp[j, t]))
                rows.append((scenario, t, "line", j, "fq", self.fq[j, t]))
                rows.append((scenario, t, "line", j, "l", self.l[j, t]))
            rows.append((scenario, t, "root", 0, "p0", self.p0[t]))
            rows.append((scenario, t, "root", 0, "q0", self.q0[t]))
        return rows


def _line_arrays(case):
    """Lines reindexed so line k feeds node order[k+1]; returns maps and R/X/S."""
    # orient every line parent -> child using the case topology
    down_nodes = [n for n in case.order if n != 0]
    li_of_node = {n: case.parent_line[n] for n in down_nodes}
    r = np.array([case.lines[li_of_node[n]].r for n in down_nodes])
    x = np.array([case.lines[li_of_node[n]].x for n in down_nodes])
    s = np.array([case.lines[li_of_node[n]].s_max for n in down_nodes])
    return down_nodes, li_of_node, r, x, s


def sweep_powerflow(case, p_inj, q_inj=None, tol=1e-10, max_sweeps=100):
    """Exact branch-flow solution for fixed nodal injections.

    p_inj/q_inj: {node: array(T)} net injections at non-root nodes
    (export-positive). Nodes absent from the dicts contribute zero. Fixed
    loads from the case are NOT added here; callers pass complete injections.
    """
    T = case.horizon
    down_nodes, li_of_node, R, X, S = _line_arrays(case)
    nodes = list(case.order)
    idx = {n: i for i, n in enumerate(nodes)}
    N, L = len(nodes), len(down_nodes)

    def inj(d, n):
        if d is None or n not in d:
            return np.zeros(T)
        return np.asarray(d[n], dtype=float)

    Pn = np.zeros((N, T))
    Qn = np.zeros((N, T))
    for n in nodes:
        if n == 0:
            continue
        Pn[idx[n]] = inj(p_inj, n)
        Qn[idx[n]] = inj(q_inj, n)

    u = np.full((N, T), case.v0 ** 2)     # flat start
    l = np.zeros((L, T))
    fp = np.zeros((L, T))
    fq = np.zeros((L, T))
    # child line positions per node, in the k = position-of-down-node indexing
    kid_lines = {n: [down_nodes.index(c) for c in case.children[n]] for n in nodes}

    for _ in range(max_sweeps):
        # backward: accumulate receiving-end flows leaf -> root, add losses
        for k in range(L - 1, -1, -1):
            d = down_nodes[k]
            recv_p = -Pn[idx[d]].copy()
            recv_q = -Qn[idx[d]].copy()
            for ck in kid_lines[d]:
                recv_p += fp[ck]
                recv_q += fq[ck]
            l[k] = (recv_p ** 2 + recv_q ** 2) / u[idx[d]]
            fp[k] = recv_p + R[k] * l[k]
            fq[k] = recv_q + X[k] * l[k]
        # forward: update voltages root -> leaf
        delta = 0.0
        for k in range(L):
            d = down_nodes[k]
            up = case.parent[d]
            new_u = u[idx[up]] - 2 * (R[k] * fp[k] + X[k] * fq[k]) + (R[k] ** 2 + X[k] ** 2) * l[k]
            if np.any(new_u <= 0):
                raise VoltageCollapse(f"non-positive squared voltage at node {d}")
            delta = max(delta, float(np.max(np.abs(new_u - u[idx[d]]))))
            u[idx[d]] = new_u
        if delta < tol:
            break
    else:
        raise NonConvergence(f"sweep residual {delta:.3e} above {tol} after {max_sweeps} sweeps")

    p0 = np.zeros(T)
    q0 = np.zeros(T)
    for ck in kid_lines[0]:
        p0 += fp[ck]
        q0 += fq[ck]
    return PowerFlowSolution(
        node_ids=tuple(nodes), v=np.sqrt(u), fp=fp, fq=fq, l=l, p0=p0, q0=q0,
        line_up=tuple(idx[case.parent[d]] for d in down_nodes),
        line_r=R, line_x=X, line_s=S,
    )


def net_injections(case, prosumer_inj=None):
    """Complete injection dicts: fixed loads as withdrawals plus prosumer exports."""
    p = {n: -case.fixed_p[n].copy() for n in case.fixed_p}
    q = {n: -case.fixed_q[n].copy() for n in case.fixed_q}
    if prosumer_inj:
        for n, arr in prosumer_inj.items():
            p[n] = p.get(n, np.zeros(case.horizon)) + np.asarray(arr, dtype=float)
    return p, q


def check_exactness(sol):
    """Max relative cone gap (l*v_up^2 - fp^2 - fq^2) / max(1, fp^2 + fq^2)."""
    u_up = sol.v[list(sol.line_up)] ** 2
    sq = sol.fp ** 2 + sol.fq ** 2
    gap = (sol.l * u_up - sq) / np.maximum(1.0, sq)
    return float(max(np.max(gap), 0.0)) if gap.size else 0.0


def loss_cost(sol, pi, delta_t):
    """Loss cost over the horizon: sum_t pi_t * dt * sum_j R_j * l_jt."""
    per_t = sol.line_r @ sol.l if sol.l.size else np.zeros(sol.p0.shape)
    return float(np.sum(np.asarray(pi) * delta_t * per_t))


@dataclass
class ConicProgram:
    """Relaxed envelope OPF, parameterized in asks and envelope prices.

    `problem` is ready to solve repeatedly after updating the `ask`/`psi`
    parameter values. Constraint handles are kept per family so duals can be
    pulled out by name after a solve.
    """

    problem: cp.Problem
    case: object
    prosumer_nodes: tuple
    scenarios: int
    ask: cp.Parameter          # (n_pros, T)
    psi: cp.Parameter          # (n_pros, T)
    alloc: cp.Variable         # (n_pros, T)
    state: dict                # per scenario: dict of cvxpy vars (u, fp, fq, l, p0, q0)
    cons: dict                 # family -> list/array of constraints
    down_nodes: list
    rho: float
    pi: np.ndarray


@dataclass(frozen=True)
class DsoDuals:
    """Multipliers of the envelope OPF, per (line-or-node, t, s).

    Voltage duals are already converted to voltage-magnitude units so they pair
    with dv/dP sensitivities directly.
    """

    eta: np.ndarray       # (L, T, S) sending-end rating
    delta: np.ndarray     # (L, T, S) receiving-end rating
    tau_hi: np.ndarray    # (N-1, T, S) upper voltage bound, magnitude units
    tau_lo: np.ndarray    # (N-1, T, S) lower voltage bound, magnitude units
    omega_p: np.ndarray   # (T, S) root active balance
    omega_q: np.ndarray   # (T, S) root reactive balance


@dataclass(frozen=True)
class ConicSolution:
    alloc: np.ndarray             # (n_pros, T)
    objective: float
    flows: tuple                  # PowerFlowSolution per scenario
    duals: DsoDuals


def build_socp_opf(case, envelope_ask, psi, rho, scenarios, pi):
    """Assemble the scenario-sampled envelope OPF as a parameterized cone program.

    For scenario s in 1..S the prosumer nodes inject (s/S) * alloc while fixed
    loads stay at forecast. The objective is the scenario-averaged loss cost
    plus the consensus penalty around the asks.
    """
    T = case.horizon
    pros = tuple(sorted(envelope_ask))
    nP = len(pros)
    S = int(scenarios)
    if S < 1:
        raise ValueError("scenarios must be >= 1")
    pi = np.asarray(pi, dtype=float)

    down_nodes, _, R, X, Smax = _line_arrays(case)
    L = len(down_nodes)
    kpos = {n: k for k, n in enumerate(down_nodes)}

    ask = cp.Parameter((nP, T), name="ask")
    psi_p = cp.Parameter((nP, T), name="psi")
    ask.value = np.array([np.asarray(envelope_ask[n], dtype=float) for n in pros])
    psi_p.value = np.array([np.asarray(psi[n], dtype=float) for n in pros]) if psi else np.zeros((nP, T))
    alloc = cp.Variable((nP, T), name="alloc")

    cons = {"balance_p": [], "balance_q": [], "vdrop": [], "cone": [],
            "rating_send": [], "rating_recv": [], "v_hi": [], "v_lo": [],
            "root_p": [], "root_q": []}
    state = []
    loss_terms = []
    for s in range(1, S + 1):
        frac = s / S
        u = cp.Variable((L, T), name=f"u_s{s}")      # squared voltage at down nodes
        fp = cp.Variable((L, T), name=f"fp_s{s}")
        fq = cp.Variable((L, T), name=f"fq_s{s}")
        lv = cp.Variable((L, T), nonneg=True, name=f"l_s{s}")
        p0 = cp.Variable(T, name=f"p0_s{s}")
        q0 = cp.Variable(T, name=f"q0_s{s}")

        bal_p, bal_q, vdrop, cone = [], [], [], []
        for k, d in enumerate(down_nodes):
            inj_p = -case.fixed_p[d]
            inj_q = -case.fixed_q[d]
            if d in pros:
                inj_expr = frac * alloc[pros.index(d)] + inj_p
            else:
                inj_expr = cp.Constant(inj_p)
            kids = [kpos[c] for c in case.children[d]]
            sum_kp = sum((fp[c] for c in kids), cp.Constant(np.zeros(T)))
            sum_kq = sum((fq[c] for c in kids), cp.Constant(np.zeros(T)))
            bal_p.append(fp[k] - R[k] * lv[k] + inj_expr == sum_kp)
            bal_q.append(fq[k] - X[k] * lv[k] + inj_q == sum_kq)
            up = case.parent[d]
            u_up = (case.v0 ** 2) if up == 0 else u[kpos[up]]
            vdrop.append(
                u[k] == u_up - 2 * (R[k] * fp[k] + X[k] * fq[k]) + (R[k] ** 2 + X[k] ** 2) * lv[k]
            )
            # rotated cone fp^2 + fq^2 <= l * u_up in standard SOC form
            cone.append(cp.SOC(lv[k] + u_up, cp.vstack([2 * fp[k], 2 * fq[k], lv[k] - u_up]), axis=0))
        rating_send = [cp.square(fp[k]) + cp.square(fq[k]) <= Smax[k] ** 2 for k in range(L)]
        rating_recv = [
            cp.square(fp[k] - R[k] * lv[k]) + cp.square(fq[k] - X[k] * lv[k]) <= Smax[k] ** 2
            for k in range(L)
        ]
        v_hi = [u[k] <= case.vmax ** 2 for k in range(L)]
        v_lo = [u[k] >= case.vmin ** 2 for k in range(L)]
        root_kids = [kpos[c] for c in case.children[0]]
        root_p = [p0 == sum((fp[c] for c in root_kids), cp.Constant(np.zeros(T)))]
        root_q = [q0 == sum((fq[c] for c in root_kids), cp.Constant(np.zeros(T)))]

        cons["balance_p"].append(bal_p)
        cons["balance_q"].append(bal_q)
        cons["vdrop"].append(vdrop)
        cons["cone"].append(cone)
        cons["rating_send"].append(rating_send)
        cons["rating_recv"].append(rating_recv)
        cons["v_hi"].append(v_hi)
        cons["v_lo"].append(v_lo)
        cons["root_p"].append(root_p)
        cons["root_q"].append(root_q)
        state.append({"u": u, "fp": fp, "fq": fq, "l": lv, "p0": p0, "q0": q0})

        loss_terms.append(cp.sum(cp.multiply(pi * case.delta_t, R @ lv)) / S)

    penalty = cp.sum(cp.multiply(psi_p, alloc)) * case.delta_t \
        + (rho / 2) * cp.sum_squares(alloc - ask) * case.delta_t
    objective = cp.Minimize(sum(loss_terms) + penalty)
    all_cons = [c for fam in cons.values() for group in fam for c in group]
    problem = cp.Problem(objective, all_cons)
    return ConicProgram(
        problem=problem, case=case, prosumer_nodes=pros, scenarios=S,
        ask=ask, psi=psi_p, alloc=alloc, state=state, cons=cons,
        down_nodes=down_nodes, rho=rho, pi=pi,
    )


def solve_conic(program, tol=1e-9):
    """Solve the cone program and pull out primal state and named duals."""
    prob = program.problem
    try:
        prob.solve(
            solver=cp.CLARABEL,
            tol_gap_abs=tol, tol_gap_rel=tol, tol_feas=tol,
            max_iter=200_000,
        )
    except cp.error.SolverError as exc:
        raise SolverStall(f"conic solver failed: {exc}")
    if prob.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        raise InfeasibleAskError("envelope OPF infeasible for the given case/asks")
    if prob.status in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
        raise Unbounded("envelope OPF unbounded")
    if prob.status != cp.OPTIMAL:
        raise SolverStall(f"conic solver stopped with status {prob.status}")

    case = program.case
    T = case.horizon
    S = program.scenarios
    down_nodes, _, R, X, Smax = _line_arrays(case)
    L = len(down_nodes)
    kpos = {n: k for k, n in enumerate(down_nodes)}
    node_ids = (0,) + tuple(down_nodes)

    flows = []
    for s in range(S):
        st = program.state[s]
        u = np.asarray(st["u"].value)
        v = np.vstack([np.full((1, T), case.v0), np.sqrt(np.maximum(u, 0.0))])
        flows.append(PowerFlowSolution(
            node_ids=node_ids,
            v=v,
            fp=np.asarray(st["fp"].value),
            fq=np.asarray(st["fq"].value),
            l=np.asarray(st["l"].value),
            p0=np.asarray(st["p0"].value).reshape(T),
            q0=np.asarray(st["q0"].value).reshape(T),
            line_up=tuple(0 if case.parent[d] == 0 else 1 + kpos[case.parent[d]] for d in down_nodes),
            line_r=R, line_x=X, line_s=Smax,
        ))

    def fam(name):
        out = np.zeros((L, T, S))
        for s in range(S):
            for k in range(L):
                dv = program.cons[name][s][k].dual_value
                out[k, :, s] = np.asarray(dv).reshape(T)
        return out

    eta = fam("rating_send")
    delta = fam("rating_recv")
    # voltage-bound duals arrive in squared-voltage units; convert via dv^2 = 2 v dv
    tau_hi_u = fam("v_hi")
    tau_lo_u = fam("v_lo")
    v_down = np.stack([flows[s].v[1:] for s in range(S)], axis=2)
    tau_hi = 2.0 * v_down * tau_hi_u
    tau_lo = 2.0 * v_down * tau_lo_u

    om_p = np.zeros((T, S))
    om_q = np.zeros((T, S))
    for s in range(S):
        om_p[:, s] = np.asarray(program.cons["root_p"][s][0].dual_value).reshape(T)
        om_q[:, s] = np.asarray(program.cons["root_q"][s][0].dual_value).reshape(T)

    return ConicSolution(
        alloc=np.asarray(program.alloc.value).reshape(len(program.prosumer_nodes), T),
        objective=float(prob.value),
        flows=tuple(flows),
        duals=DsoDuals(eta=eta, delta=delta, tau_hi=tau_hi, tau_lo=tau_lo,
                       omega_p=om_p, omega_q=om_q),
    )
