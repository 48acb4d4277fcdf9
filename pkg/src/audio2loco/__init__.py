"""Audio-conditioned humanoid motion tracking: alignment, mixture-of-experts teacher RL and a diffusion student."""

__version__ = "0.1.0"
