"""Synthetic camera-lens soiling toolkit.

Generates artificially soiled images by compositing GAN-translated soiling
patterns into clean images through per-pixel alpha masks, provides the mask
machinery (VAE sampling, latent walks, segmentation-derived masks), and ships
the evaluation harness that quantifies augmentation benefit and the
degradation soiling inflicts on semantic segmentation.
"""

__version__ = "0.1.0"
