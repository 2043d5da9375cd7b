"""Spatiotemporal anomaly detection for micro-expression-like events.

A recurrent convolutional autoencoder learns the normal dynamics of 16
facial sub-blocks; per-block Gaussian mixtures over its latents score new
footage, and an adaptive threshold on the smoothed score curve spots rare,
fast, localized events in time and space.
"""

__version__ = "0.1.0"
