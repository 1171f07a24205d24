"""Skill-latent offline RL pipeline on a built-in sparse-reward point maze.

Stages: segment VAE -> state-conditioned latent diffusion -> diffusion-guided
implicit Q-learning -> value-aware policy execution with replanning.  Exact
tabular machinery and the numerics core live alongside for verification.
"""

from . import autodiff, nn

__version__ = "0.1.0"
