"""Opportunistic QKD over classical WDM links: traffic, channel availability,
key-buffer dynamics and first-passage statistics."""

__version__ = "0.1.0"
