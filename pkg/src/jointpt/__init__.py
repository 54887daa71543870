"""Joint multi-domain pretraining of atomistic force fields, at desk scale."""

__version__ = "0.1.0"

from .core import AtomicSystem, Batch, collate
from .errors import JointPTError
from .model import HeadSpec, Model, ModelConfig

__all__ = ["AtomicSystem", "Batch", "collate", "JointPTError", "HeadSpec", "Model", "ModelConfig", "__version__"]
