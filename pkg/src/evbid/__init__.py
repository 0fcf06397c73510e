"""Real-time bidding of EV charging aggregators into a locational electricity market."""

from .bidding import BidCurve, build_bid_curve, build_linear_bid_curve, inverse_demand, sample_curve
from .fleet import EvTask, Fleet, FleetParams, GroupSpec
from .harness import RunResult, RunSummary, compare, run_offline_oracle, run_online, sweep
from .market import Generator, Line, Load, MarketInfeasibleError, Network, clear_p4, refine_p5
from .scenario import Scenario, ScenarioError, bundled
from .scheduler import QueueState, SchedulerParams, solve_p2
from .solver import QpProblem, QpSolution, solve_lp, solve_qp

__version__ = "0.1.0"

__all__ = [
    "BidCurve", "EvTask", "Fleet", "FleetParams", "Generator", "GroupSpec", "Line", "Load",
    "MarketInfeasibleError", "Network", "QpProblem", "QpSolution", "QueueState", "RunResult",
    "RunSummary", "Scenario", "ScenarioError", "SchedulerParams", "build_bid_curve",
    "build_linear_bid_curve", "bundled", "clear_p4", "compare", "inverse_demand", "refine_p5",
    "run_offline_oracle", "run_online", "sample_curve", "solve_lp", "solve_p2", "solve_qp", "sweep",
]
