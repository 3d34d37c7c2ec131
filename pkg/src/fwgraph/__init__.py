"""Averaging of fast Hamiltonian SDEs onto the Reeb graph of H.

The package projects a planar fast-oscillating SDE onto the Reeb graph of
its Hamiltonian and compares it against the limiting graph diffusion.
"""

from .hamiltonian_model import (
    HamiltonianSystem,
    OperatorValues,
    duffing,
    evaluate_operators,
    hamiltonian_flow_step,
    harmonic,
    make_model,
    modulated_harmonic,
    perturbation_sup_norm,
    register_model,
)
from .topology import (
    CriticalPoint,
    GraphPoint,
    ReebGraph,
    build_reeb_graph,
    find_critical_points,
    graph_distance,
    identify,
)
from .level_integrals import (
    EdgeCoefficients,
    GluingData,
    compensating_drift,
    edge_coefficients,
    generalized_operator_residual,
    gluing_probabilities,
    trace_cycle,
)
from .fast_slow_sim import (
    StopSpec,
    edge_resolvent,
    hitting_statistics,
    integrate_ensemble,
    simulate_path,
)
from .graph_process import (
    GraphDiffusionSpec,
    build_spec,
    resolvent_apply,
    simulate_graph_path,
)
from .verification import ComparisonReport, run_test

__version__ = "0.1.0"
