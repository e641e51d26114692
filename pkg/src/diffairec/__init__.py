"""Fair recommendation with a counterfactually conditioned diffusion model."""

__version__ = "0.1.0"
