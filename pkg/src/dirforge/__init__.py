"""Transfer known style-space edit directions into a diffusion model's
conditioning space and apply them as extra guidance terms."""

__version__ = "0.1.0"
