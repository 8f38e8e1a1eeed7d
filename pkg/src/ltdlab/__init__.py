"""Desk-scale latent diffusion lab built around Latent Temporal Discrepancy loss weighting."""

from ltdlab.tensor_core import (
    FormatError,
    InvalidShapeError,
    Rng,
    load_tensor,
    save_tensor,
)

__version__ = "0.1.0"

__all__ = [
    "FormatError",
    "InvalidShapeError",
    "Rng",
    "load_tensor",
    "save_tensor",
]
