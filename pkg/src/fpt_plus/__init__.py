"""FPT+: frozen high-resolution backbone, fine-grained prompts and a small side network.

A from-scratch tensor engine, Vision Transformer, side-network fusion,
feature preloading, training loop and efficiency profiler.
"""

from .__version__ import __version__

__author__ = "fpt-plus Contributors"
__all__ = ['__version__', '__author__']
