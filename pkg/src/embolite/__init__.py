"""embolite: two-stage pulmonary-embolism detection on synthetic phantoms."""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad  # noqa: F401
