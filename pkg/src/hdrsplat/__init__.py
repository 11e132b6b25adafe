"""HDR Gaussian splatting from single-exposure LDR views."""

__version__ = "0.1.0"
