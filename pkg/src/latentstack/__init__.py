"""Composable multi-domain unpaired image translation.

Trains per-pair translators over N image domains that share a single latent
block, so translators can be stacked into chains that reach attribute
combinations never present in any training set.
"""

__version__ = "0.1.0"

from latentstack.configs import ClassifierSpec, LossWeights, ModelConfig, OracleConfig, \
    TrainConfig
from latentstack.errors import ConfigError, ContractError, DivergenceError, FormatError, \
    IngestionError, NumericalError, TransplantError
from latentstack.networks import NetworkSet, Translator, build_networks

__all__ = [
    "ClassifierSpec",
    "ConfigError",
    "ContractError",
    "DivergenceError",
    "FormatError",
    "IngestionError",
    "LossWeights",
    "ModelConfig",
    "NetworkSet",
    "NumericalError",
    "OracleConfig",
    "TrainConfig",
    "Translator",
    "TransplantError",
    "build_networks",
    "__version__",
]
