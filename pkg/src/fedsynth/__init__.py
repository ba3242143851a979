"""Deterministic federated-learning simulator with GAN/DDPM synthetic augmentation."""

__version__ = "0.1.0"
