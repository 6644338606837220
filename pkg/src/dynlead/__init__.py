"""Dynamic lead field mappings: rank and sensitivity of MEG/EEG source models with dynamics."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    LeadField, NoiseModel, SensorArray, SourceSpace, load_csv_matrix, load_matrix, save_matrix,
)
from .dynamics import DynamicsModel, backward_model, build_input_covariance, build_transition, steady_state_covariance  # noqa: E402
from .dynmap import (  # noqa: E402
    DynamicMapping, ModelKind, TemporalCov, assemble_dyn, assemble_ind, assemble_sts,
    build_sts_temporal_cov, projection_matrix_general,
)
from .analysis import (  # noqa: E402
    SensitivityMap, SpectrumReport, null_space_projected_sensitivity, relative_sensitivity,
    sensitivity, sensitivity_difference, singular_spectrum,
)
from .forward import SphereConfig, build_sphere_geometry, compute_lead_field  # noqa: E402
