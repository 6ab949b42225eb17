"""Deepfake detection and generative-model source attribution on a numpy convnet."""

__version__ = "0.1.0"
