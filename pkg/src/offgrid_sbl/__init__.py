"""Off-grid sparse Bayesian learning for downlink channel estimation."""

from .array_model import (
    ArrayGeometry,
    GeometryError,
    dft_basis,
    leakage_coefficient,
    overcomplete_dft_matrix,
    steering_2d,
    steering_deriv_phi,
    steering_deriv_theta,
    steering_linear,
)
from .baselines import (
    L1Config,
    default_epsilon,
    dft_estimate,
    l1_recover,
    ongrid_sbl_estimate,
    overcomplete_dft_estimate,
)
from .channel_sim import (
    ClusterChannelConfig,
    generate_channel,
    generate_pilots,
    ls_uplink_estimate,
    nmse,
    observe_downlink,
    observe_uplink,
)
from .joint_uplink import estimate_uplink_aided
from .offgrid_refine import RefineConfig, estimate_offgrid_2d, estimate_offgrid_linear
from .sbl_core import Hyperpriors, NumericalError, OffGridDictionary, SblState

__version__ = "0.1.0"
