"""Adversarial attack detection for learned spacecraft relative pose estimation."""

__version__ = "0.1.0"
