"""Layout-driven editing of diffusion-generated scenes.

Move, resize, and restyle individual objects in a generated image by editing
a lightweight layout (boxes + masks) instead of re-prompting.  The package
drives a pluggable denoiser backend through deterministic inversion and
sampling, steers object placement with cross-attention region losses, and
carries object appearance across with feature-space projection.
"""

__version__ = "0.1.0"

from . import backend
from .backend import get_backend, make_toy_denoiser, register_adapter

__all__ = ["backend", "get_backend", "make_toy_denoiser", "register_adapter", "__version__"]
