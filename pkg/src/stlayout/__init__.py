"""Layout-guided spatial-temporal attention control for toy video diffusion."""

__version__ = "0.1.0"
