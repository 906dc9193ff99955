"""Multiphase line-parameter identification from micro-PMU data.

Simulate a feeder whose loads follow an Ornstein-Uhlenbeck model, then
estimate per-branch, per-phase-pair conductances and susceptances in two
stages: a covariance / matrix-logarithm regression for an initial guess and a
Broyden refinement on the power-mismatch equations.
"""
from .errors import (
    DataError,
    DegenerateSamples,
    DimensionMismatch,
    Divergence,
    DivergingIterates,
    EmptyComparableSet,
    FeederIdError,
    IllConditionedL,
    LogBranchError,
    MaxIterationsExceeded,
    NonConvergence,
    NonPositiveTau,
    NumericalError,
    OutputExistsError,
    PhaseConsistencyError,
    SchemaError,
    SingularCovariance,
    SingularImpedance,
)
from .evaluation import EvaluationReport, ExperimentConfig, emit_outputs, load_feeder, mape, run_experiment
from .network import (
    Base,
    BranchAdmittance,
    BranchImpedance,
    Bus,
    BusAdmittance,
    NetworkModel,
    PhaseSet,
    assemble_bus_admittance,
    branch_admittances,
    invert_branch_impedance,
    load_network,
    save_network,
)
from .powerflow import (
    OperatingPoint,
    ParameterIndex,
    injections,
    parameter_jacobian,
    solve_power_flow,
    state_jacobian,
)
from .simulation import (
    LoadDynamics,
    MeasurementSeries,
    NoiseSpec,
    add_measurement_noise,
    default_dynamics,
    equilibrium,
    read_measurements,
    simulate,
    stationary_covariance,
    true_state_matrix,
    write_measurements,
)
from .stage1 import covariances, estimate_state, estimate_state_matrix, estimate_time_constants, extract_initial_parameters
from .stage2 import (
    ParameterEstimate,
    PipelineOptions,
    RefinementProblem,
    broyden_refine,
    mismatch,
    run_pipeline,
)

__version__ = "0.1.0"
