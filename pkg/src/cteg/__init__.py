"""Text-to-3D-facial-expression generation.

Library layout:
  tensor, rng        autodiff engine and deterministic random streams
  blocks             attention / positional encoding / FFN building blocks
  ewa                expression-wise attention frame encoder
  cvad, model        conditional variational autoregressive decoder
  optim, runtime     Adam + warmup schedule, training loop, decoding
  checkpoint         binary checkpoint format
  dataio             dataset files, text encoders, synthetic corpus
  metrics, evaluate  generation-quality metrics and the evaluation driver
  report             delimited reports and matplotlib figures
  verify             built-in verification suite
  cli                command-line entry point (`cteg`)
"""

from .config import EXPR_DIM, ModelConfig
from .model import CtegModel
from .rng import RngStream
from .tensor import Tensor, backward, grad_check

__version__ = "0.1.0"

__all__ = ["EXPR_DIM", "ModelConfig", "CtegModel", "RngStream", "Tensor",
           "backward", "grad_check", "__version__"]
