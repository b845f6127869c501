"""Exact desk-scale laboratory for paired-encoder self-supervised objectives.

The package studies a ridge-regularized two-view objective and its
stop-gradient (self-distillation) variant on finite discrete view
distributions, where every expectation is an exact weighted sum:

* :mod:`peira.distributions` — joint tables, samplers, serialization.
* :mod:`peira.matstack`      — small dense linear-algebra helpers.
* :mod:`peira.objectives`    — objective, predictor, gradients, the
  stop-gradient field, and the Lyapunov polynomial.
* :mod:`peira.cca_oracle`    — exact canonical decomposition of a table and
  the coordinate system that diagonalizes the dynamics.
* :mod:`peira.kernels`       — compiled (or pure-numpy) hot loops.
* :mod:`peira.flows`         — RK4 integrators for both dynamics.
* :mod:`peira.equilibria`    — critical-point families, closed-form Jacobian
  eigenvalues, stability classification.
* :mod:`peira.trainer`       — stochastic training with EMA predictor buffers.
* :mod:`peira.diagnostics`   — effective rank, alignment, principal angles.
* :mod:`peira.cli`           — JSON-configured experiment runner.
"""

from .matstack import (
    NumericalError,
    ShapeError,
    SymSpectrum,
    frobenius,
    solve_spd,
    svd,
    sym_eig,
)
from .distributions import (
    JointTable,
    SamplePairs,
    make_product,
    make_two_state,
    perturb_distinct,
    sample,
    table_from_json,
    table_to_json,
)
from .objectives import (
    EncoderPair,
    Moments,
    Predictor,
    aux_loss,
    lyapunov,
    lyapunov_from_moments,
    lyapunov_gradient,
    moments,
    optimal_predictor,
    peira_gradient,
    peira_objective,
    random_encoder_pair,
    residual_objective,
    ssl_vector_field,
)
from .cca_oracle import (
    CcaDecomposition,
    CoordinatePoint,
    OperatorSpectrum,
    cca_from_json,
    cca_to_json,
    coordinate_principal_angles,
    coordinates_of,
    exact_cca,
    from_coordinates,
    operator_spectrum,
    principal_angles,
)
from .flows import (
    FlowConfig,
    FlowDivergenceError,
    Trajectory,
    coordinate_field,
    integrate_coordinate_flow,
    integrate_function_flow,
)
from .equilibria import (
    STABILITY_TOL,
    EquilibriumSpec,
    JacobianSpectrum,
    StabilityReport,
    build_coordinates,
    build_equilibrium,
    classify_stability,
    enumerate_specs,
    filter_f,
    filter_g,
    is_stable_family,
    jacobian_fd,
    jacobian_fd_eigenvalues,
    jacobian_spectrum_closed_form,
    mode_amplitudes,
    optimal_value,
    random_rotation,
    top_mode_count,
)
from .trainer import (
    EmaBuffers,
    MetricsLog,
    MlpEncoder,
    OneHotEncoder,
    SgdMomentum,
    TrainerConfig,
    TrainingDivergedError,
    TrainResult,
    ema_rate,
    feature_gradients,
    learning_rate_at,
    mlp_backprop_check,
    sc_peira_step,
    train,
)
from .diagnostics import (
    MetricsRow,
    active_modes,
    alignment,
    effective_rank,
    signal_spectrum,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # matstack
    "NumericalError", "ShapeError", "SymSpectrum", "frobenius", "solve_spd",
    "svd", "sym_eig",
    # distributions
    "JointTable", "SamplePairs", "make_product", "make_two_state",
    "perturb_distinct", "sample", "table_from_json", "table_to_json",
    # objectives
    "EncoderPair", "Moments", "Predictor", "aux_loss", "lyapunov",
    "lyapunov_from_moments", "lyapunov_gradient", "moments",
    "optimal_predictor", "peira_gradient", "peira_objective",
    "random_encoder_pair", "residual_objective", "ssl_vector_field",
    # cca_oracle
    "CcaDecomposition", "CoordinatePoint", "OperatorSpectrum", "cca_from_json",
    "cca_to_json", "coordinate_principal_angles", "coordinates_of", "exact_cca",
    "from_coordinates", "operator_spectrum", "principal_angles",
    # flows
    "FlowConfig", "FlowDivergenceError", "Trajectory", "coordinate_field",
    "integrate_coordinate_flow", "integrate_function_flow",
    # equilibria
    "STABILITY_TOL", "EquilibriumSpec", "JacobianSpectrum", "StabilityReport",
    "build_coordinates", "build_equilibrium", "classify_stability",
    "enumerate_specs", "filter_f", "filter_g", "is_stable_family",
    "jacobian_fd", "jacobian_fd_eigenvalues", "jacobian_spectrum_closed_form",
    "mode_amplitudes", "optimal_value", "random_rotation", "top_mode_count",
    # trainer
    "EmaBuffers", "MetricsLog", "MlpEncoder", "OneHotEncoder", "SgdMomentum",
    "TrainerConfig", "TrainingDivergedError", "TrainResult", "ema_rate",
    "feature_gradients", "learning_rate_at", "mlp_backprop_check",
    "sc_peira_step", "train",
    # diagnostics
    "MetricsRow", "active_modes", "alignment", "effective_rank",
    "signal_spectrum",
]
