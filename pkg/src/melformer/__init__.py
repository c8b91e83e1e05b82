"""Multilevel transformer for audio+text emotion recognition, from scratch."""

__version__ = "0.1.0"

from .autograd import Tensor, backward, gradcheck, no_grad  # noqa: F401
