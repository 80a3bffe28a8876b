"""Conditional adversarial network framework.

A from-scratch implementation of two-branch conditional generator and
discriminator MLPs trained under the adversarial minimax objective, with
manual reverse-mode differentiation, Gaussian Parzen-window likelihood
evaluation, MNIST and synthetic data pipelines, and a CLI for training,
conditional sampling, and evaluation.
"""

__version__ = "0.1.0"
