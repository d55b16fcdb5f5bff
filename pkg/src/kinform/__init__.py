"""Multi-task kinship verification on a small numpy autograd engine."""

__version__ = "0.1.0"

from .data import KinshipClass, KinshipDataset, SyntheticConfig, generate_synthetic  # noqa: E402
from .estimator import KinshipVerifier  # noqa: E402
from .training import TrainConfig, train  # noqa: E402

__all__ = [
    "KinshipClass",
    "KinshipDataset",
    "KinshipVerifier",
    "SyntheticConfig",
    "TrainConfig",
    "__version__",
    "generate_synthetic",
    "train",
]
