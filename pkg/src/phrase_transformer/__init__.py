"""Transformer translation with attentive phrase representations."""

from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
