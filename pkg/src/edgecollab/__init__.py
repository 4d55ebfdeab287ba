"""Collaborative-learning edge detection robust to noisy boundary labels."""

from . import core, data, ensemble, evaluation, loss, models, trainer

__version__ = "0.1.0"

__all__ = ["core", "data", "ensemble", "evaluation", "loss", "models", "trainer"]
