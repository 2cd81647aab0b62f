"""Continual learning for spiking networks, with a simulated neuromorphic
chip in the training loop."""

__version__ = "0.1.0"
