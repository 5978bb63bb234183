"""Jobs from FDI and global value chain participation: panel IV/GMM toolkit."""

from .estimator import EstimationError, EstimationResult, run_specification
from .model import ModelSpec, ReplicationPlan
from .panel import PanelDataset
from .synthgen import SyntheticConfig, generate_calibrated, monte_carlo

__version__ = "0.1.0"

__all__ = [
    "EstimationError",
    "EstimationResult",
    "ModelSpec",
    "PanelDataset",
    "ReplicationPlan",
    "SyntheticConfig",
    "generate_calibrated",
    "monte_carlo",
    "run_specification",
]
