"""MRI-report contrastive alignment on synthetic paired data."""

__version__ = "0.1.0"
