"""VAE with a conditional diffusion prior for long-tail document-level relation extraction."""

__version__ = "0.1.0"
