"""Meta-transfer learning for few-shot, style-conditioned voice cloning on synthetic spectrograms."""

__version__ = "0.1.0"
