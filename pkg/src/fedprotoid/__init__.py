"""Federated, prototype-guided domain adaptation for re-identification on
synthetic camera-shifted data.
"""

from .config import ConfigError, ExperimentConfig, load_config
from .encoder import ModelParams, forward
from .estimator import FedProtoEmbedder
from .evaluation import RetrievalSplit, retrieval_metrics
from .federation import run_federation
from .numerics import KernelSpec, mmd2
from .synthgen import SynthSpec, generate

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "FedProtoEmbedder",
    "KernelSpec",
    "ModelParams",
    "RetrievalSplit",
    "SynthSpec",
    "forward",
    "generate",
    "load_config",
    "mmd2",
    "retrieval_metrics",
    "run_federation",
]
