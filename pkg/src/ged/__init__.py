"""Single-pass latent edge prediction with granularity control."""

__version__ = "0.1.0"
