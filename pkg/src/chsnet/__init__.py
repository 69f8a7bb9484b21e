"""Crowd counting with a convolution head and a transformer head that supervise each other in noisy regions."""

__version__ = "0.1.0"
