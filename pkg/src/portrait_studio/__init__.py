"""Controllable portrait animation on a synthetic face world.

A tri-plane volumetric generator, morphable-model expression transfer,
two-stage masked latent inversion with mouth in-painting, pose-conditioned
re-rendering, video re-enactment compositing and flow-based attribute
editing, all verified against a procedural world with known factors.
"""

__version__ = "0.1.0"
