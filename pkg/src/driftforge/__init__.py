"""Memristor resistive-drift simulation, conditional GAN modelling and quantizer design."""

__version__ = "0.1.0"
