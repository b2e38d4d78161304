"""Variational inference on a small reverse-mode autodiff core.

Coordinate-ascent and stochastic VI for probabilistic PCA, pathwise and
score-function gradient estimators, and black-box VI for non-linear PCA and
variational autoencoders.
"""

__version__ = "0.1.0"
