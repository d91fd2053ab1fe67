"""Wavelet-guided misalignment-aware visible-infrared detection at desk scale."""

from wmnet.validation import ValidationError

__version__ = "0.1.0"

__all__ = ["ValidationError", "__version__"]
