"""Pose-guided speaking-avatar reenactment with a two-branch latent diffusion model."""

__version__ = "0.1.0"
