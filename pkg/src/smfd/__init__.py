"""Semantic-mask guided face deblurring at desk scale."""

__version__ = "0.1.0"
