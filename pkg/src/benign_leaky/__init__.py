"""Numerical laboratory for benign overfitting of leaky-ReLU two-layer networks
trained by gradient descent on two-class mixture data."""
from .errors import (
    BenignLeakyError,
    BridgeInapplicable,
    ConfigurationError,
    ContractViolation,
    DegenerateDataError,
    NumericalFailure,
    ScaleGuardError,
    SeparabilityError,
    SolverFailure,
)
from .estimators import LeakyReLUNetworkClassifier, MaxMarginLimitClassifier, MinNormLimitClassifier
from .limit import (
    BlockGram,
    LimitDirection,
    a_matrix_inverse_action,
    build_block_gram,
    d_bounds,
    decision_boundary_check,
    direction_diagnostics,
    equivalence_failure_probe,
    min_norm_direction,
    qp_oracle,
)
from .mixture import Dataset, MixtureSpec, NoiseLaw, SigmaSpec, data_functionals, generate
from .network import (
    NetworkState,
    NeuronSplit,
    TrainConfig,
    TrainTrace,
    activation_report,
    empirical_loss,
    forward,
    gd_step,
    init_network,
    sigma_max_tilde_bound,
    train,
)
from .regime import (
    RegimeReport,
    check_assumptions,
    check_theorem2_regime,
    measure_event_E,
    measure_tilde_events,
    tilde_to_E_bridge,
)
from .risk import ErrorReport, bayes_error, exact_gaussian_error, gaussian_bracket, kappa, mc_error, phase_summary

__version__ = "0.1.0"
