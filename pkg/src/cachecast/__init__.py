"""Average-cost multicast scheduling with caching: solvers, structure checks, simulation."""

from .approx import BasePolicy, SSAPolicy, base_policy_residual, decompose, ssa
from .arrivals import (ArrivalDistribution, MarkovArrivalModel, independent_product,
                       per_user_zipf_arrivals, zipf_pmf)
from .errors import CapacityError, ErgodicityError, StructureError, UnichainError
from .model import IDLE, StateSpace, SystemConfig, load_config
from .policies import (extract_switch_curves, verify_partial_switch_structure,
                       verify_switch_structure)
from .sim import SimOptions, exact_average_cost, simulate
from .solvers import (SolveOptions, policy_evaluate, solve, solve_markov_modulated)

__version__ = "0.1.0"
