"""ISI-aware modeling, verification and achievable rate analysis of MCvD channels."""

from .channel import (
    ChannelCoefficients,
    DemodulationModel,
    analytical_coefficients,
    bit_error_probability,
    demod_prob_table,
    demod_prob_tables,
    received_count_pmf,
)
from .config import ScenarioFile, SimulationConfig, build_config, load_scenario
from .diffusion import (
    ArrivalHistogram,
    TransmissionTrace,
    estimate_channel_coefficients,
    simulate_impulse,
    simulate_sequence,
)
from .errors import (
    ConfigurationError,
    DegenerateCoefficientsError,
    InconsistentModelError,
    McvdError,
    TestInapplicableError,
)
from .rate import (
    InputDistribution,
    RateSurface,
    achievable_rate,
    conditional_entropy_rate,
    forward_entropy_estimate,
    mutual_information_rate,
)
from .verification import FitGrid, GofResult, chi_square_gof, collect_window_counts
