"""Canonical point autoencoder for dense correspondence between 3D point clouds."""

__version__ = "0.1.0"
