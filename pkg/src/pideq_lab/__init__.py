"""Physics-informed deep equilibrium models for ODE initial value problems."""

__version__ = "0.1.0"

from . import autodiff, models, physics, reference, rootfind, training

__all__ = ["autodiff", "models", "physics", "reference", "rootfind", "training", "__version__"]
