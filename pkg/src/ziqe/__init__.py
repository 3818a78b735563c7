"""Speech-translation quality estimation with a zero-inflated Beta output head."""

__version__ = "0.1.0"
