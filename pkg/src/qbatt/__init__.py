"""Open spin-chain quantum batteries charged under homodyne feedback."""
from .analytic import (
    SingularParameterError,
    critical_J_n2,
    deltaE1_deltaE2,
    optimal_f_thermal,
    rho11_max,
    rho11_max_thermal,
    thermal_mu,
    thermal_steady_populations,
    xxx2_ode_rhs,
    xxx2_steady_populations,
    xxx2_stored_energy,
    xxx_highest_energy,
)
from .dynamics import (
    EvolutionResult,
    FeedbackGenerator,
    NumericalError,
    PositivityError,
    evolve,
    feedback_me_rhs,
    steady_state,
    thermal_me_rhs,
)
from .metrics import MetricsRecord, capacity, ergotropy, evaluate, stored_energy, utilization
from .operators import (
    ChainSpec,
    ControlSpec,
    ValidationError,
    all_down,
    all_up,
    build_battery_hamiltonian,
    build_feedback_operator,
    build_pauli,
    ground_state,
    spectrum,
)
from .sweeps import (
    Axis,
    ChiOptimum,
    SweepSurface,
    find_critical_J,
    golden_section,
    grid_sweep,
    optimize_chi,
    scan_1d,
)
from .trajectories import (
    EnsembleResult,
    NoiseProcess,
    TrajectoryRecord,
    homodyne_current,
    run_ensemble,
    sme_step,
    thermal_sme_step,
)

__version__ = "0.1.0"
