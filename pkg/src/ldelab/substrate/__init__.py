from ldelab.substrate import tensor as ops
from ldelab.substrate.gradcheck import grad_check, grad_check_params
from ldelab.substrate.linalg import sym_eig
from ldelab.substrate.rng import RngStream, derive_seed
from ldelab.substrate.tensor import Tape, Tensor, forward_backward

__all__ = ["ops", "grad_check", "grad_check_params", "sym_eig", "RngStream", "derive_seed",
           "Tape", "Tensor", "forward_backward"]
