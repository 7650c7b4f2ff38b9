"""Identity-preserving image synthesis on a toy avatar domain."""

__version__ = "0.1.0"
