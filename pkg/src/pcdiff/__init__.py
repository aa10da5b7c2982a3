"""Conditional diffusion for colored point clouds from one RGB image.

Submodules: ``tensor`` (reverse-mode autodiff), ``diffusion`` (schedule and
forward/reverse steps), ``conditioning`` (image encoder, time embedding,
gate-bias modulation), ``predictors`` (noise and color networks),
``renderer`` (point-cloud volume rendering), ``losses`` (losses and CD/EMD),
``io`` (PLY/PNG/scenes/checkpoints, synthetic shapes), ``pipeline``
(training, reconstruction, evaluation) and ``cli``.
"""

__version__ = "0.1.0"
