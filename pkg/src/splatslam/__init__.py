"""CPU semantic Gaussian splatting SLAM.

A desk-scale, verification-first implementation of a splatting-based
RGB-D-semantic SLAM pipeline: a differentiable semantic Gaussian
rasterizer with hand-derived gradients, frame-to-model tracking, and
geometric-semantic-consistent mapping.
"""

__version__ = "0.1.0"
