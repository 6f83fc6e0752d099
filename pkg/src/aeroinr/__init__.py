"""Implicit neural representation surrogates for steady fields on meshes."""
from .tensorcore import Tensor, Tape, value_and_grad  # noqa: F401

__version__ = "0.1.0"
