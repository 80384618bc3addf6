"""Amortized variational estimation for graded response models.

Four estimators over one decoder: VAE and IWAE with a Gaussian inference
network, AVB and IWAVB with an implicit (noise-injecting) inference network
trained against an adversarial density-ratio discriminator.
"""

__version__ = "0.1.0"
