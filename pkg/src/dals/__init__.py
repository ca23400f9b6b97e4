"""Latent-surface shape modelling: decoder training, latent-field fitting, evaluation."""

__version__ = "0.1.0"
