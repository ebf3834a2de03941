"""Defect detection for additive-manufacturing layer images: tensor core, synthetic
minority-class augmentation, CNN/DAE/GAN models, evaluation and serving."""

__version__ = "0.1.0"
