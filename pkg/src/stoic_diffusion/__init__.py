"""
STOIC Diffusion - token-free initial-convolution diffusion models with fixed-size core blocks
"""

__version__ = "0.1.0"
