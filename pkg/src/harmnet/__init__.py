"""Attentive CNN-RNN classifiers for harm severity in incident narratives."""

__version__ = "0.1.0"
