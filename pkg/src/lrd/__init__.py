"""Latent replay for continual object detection on small devices.

Modules: core (boxes, grid cells), autodiff (tape and Adam), detector,
compression (FiLM-conditioned compressor), sampling (IoU farthest-point
selection), memory (byte-budgeted latent buffer), trainer, metrics, data,
experiments and cli.
"""

__version__ = "0.1.0"
