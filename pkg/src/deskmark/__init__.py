"""deskmark: desk-scale invisible image watermarking lab."""

__version__ = "0.1.0"
