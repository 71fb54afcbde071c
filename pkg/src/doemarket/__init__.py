"""Envelope-constrained peer-to-peer-to-grid market clearing on radial feeders.

Prosumer agents and a network allocator negotiate export envelopes and
bilateral trades by consensus ADMM (optionally communication-censored) over a
branch-flow network model.
"""

from .netmodel import (
    BoundsError, CaseError, DuplicateProsumerError, Line, MarketParams,
    NetworkCase, ProsumerSpec, SchemaError, TopologyError, UnknownNodeError,
    case_digest, load_case, path_to_root, serialize_case,
)
from .distflow import (
    ConicProgram, Infeasible, InfeasibleAskError, NonConvergence,
    PowerFlowSolution, SolverStall, Unbounded, VoltageCollapse,
    build_socp_opf, check_exactness, loss_cost, net_injections,
    solve_conic, sweep_powerflow,
)
from .prosumer import (
    AgentInfeasible, LocalDecision, LocalEstimates, PriceReport, ProsumerAgent,
    censor, initial_estimates, solve_local, surplus, update_estimates,
)
from .dso import (
    DsoAgent, EnvelopeState, PriceBreakdown, SensitivityError, decompose_price,
    dso_cost, envelope_sensitivities, solve_dso, update_doe_price,
)
from .coordinator import (
    ClearingResult, EnvelopeAsk, EnvelopeGrant, IterationTrace, TradeOffer,
    adaptive_threshold, check_convergence, integrity_check, run_clearing,
    sample_envelope_integrity, solve_centralized_oracle,
)
from .cases import builtin_case, write_cases

__version__ = "0.1.0"
