"""Identify VR applications and user activities from encrypted-traffic metadata."""

__version__ = "0.1.0"
