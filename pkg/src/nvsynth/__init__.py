"""Depth-guided novel view synthesis at desk scale.

A transforming auto-encoder whose latent code is rigidly moved to the
target pose, a depth decoder that drives differentiable warping of encoder
feature maps, and a pixel decoder consuming the warped skip connections.
Ground truth comes from a built-in procedural renderer.
"""

__version__ = "0.1.0"
