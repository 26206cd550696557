"""Patlak parametric imaging with diffusion-based priors.

Dense-volume plumbing, Patlak kinetics, synthetic phantoms, DDPM machinery,
and three estimators (iterative baseline fit, posterior-sampling chain,
half-quadratic-splitting solver with a regularization-by-denoising inner
loop), plus classical denoisers and evaluation metrics.
"""

__version__ = "0.1.0"
