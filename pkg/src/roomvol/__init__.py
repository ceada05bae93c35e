"""Blind room-volume estimation from single-channel noisy speech.

Submodules: ``features`` (gammatone front end), ``room`` (image-source RIRs),
``dataset`` (manifests, mixing, rendering), ``augment`` (SpecAugment),
``model`` / ``adapt`` / ``checkpoint`` (patch transformer), ``train``
(optimisation and metrics), ``cli`` (command-line pipeline).
"""

from .errors import (AssetError, CheckpointError, ConfigurationError, ContractError, DataFormatError,
                     EstimationError, NumericalError, ParameterError, RoomVolError)
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "__version__",
    "RoomVolError", "ParameterError", "ConfigurationError", "AssetError", "EstimationError",
    "NumericalError", "ContractError", "CheckpointError", "DataFormatError",
]
