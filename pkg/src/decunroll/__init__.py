"""Decentralized LASSO solvers, their learned unrolling, and convergence diagnostics."""

from .diagnostics import (
    centralized_lasso_oracle,
    fixed_point,
    kkt_residual,
    lyapunov_check,
    recovery_scaling_experiment,
    bound_chain_check,
    theorem_quantities,
)
from .errors import (
    ConvergenceError,
    DecUnrollError,
    DivergenceError,
    NotPSDError,
    ParameterError,
    ParseError,
    StateError,
    ValidationError,
)
from .instance import (
    InstanceConfig,
    LassoInstance,
    namse,
    read_dataset,
    sample_dataset,
    sample_instance,
    write_dataset,
)
from .solvers import PG_EXTRA, PROX_DGD, ParamSchedule, ProblemBatch, run_solver, soft_threshold
from .topology import (
    CommGraph,
    MixingPair,
    check_assumption1,
    make_pg_extra_pair,
    metropolis_weights,
    psd_sqrt,
    sample_connected_graph,
)
from .unroll import (
    LearnableParams,
    TrainConfig,
    backward,
    evaluate,
    finite_diff_grad,
    forward_unrolled,
    train,
)

__version__ = "0.1.0"
