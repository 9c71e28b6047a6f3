"""Test-time adaptation for real-image denoising via meta-auxiliary and meta-transfer learning."""

__version__ = "0.1.0"
