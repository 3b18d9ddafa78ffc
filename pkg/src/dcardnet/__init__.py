"""DcardNet diabetic-retinopathy classifier on a small numpy autodiff engine."""

from dcardnet.kernels import BACKEND
from dcardnet.tensor import Parameter, Tensor, make_rng, no_grad

__version__ = "0.1.0"

__all__ = ["BACKEND", "Parameter", "Tensor", "make_rng", "no_grad"]
