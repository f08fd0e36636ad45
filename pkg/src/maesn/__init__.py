"""Meta-reinforcement learning with structured latent exploration noise."""

__version__ = "0.1.0"
