"""Capsule networks with reconstruction-based adversarial detection.

Submodules: ``ndgrad`` (autodiff), ``nets`` (models and training),
``detect`` (threshold detector), ``attacks``, ``evalkit`` (metrics),
``datio`` (datasets and corruptions) and ``cli``.
"""

__version__ = "0.1.0"
