"""Personalized textured hand avatars from monocular RGB sequences."""

__version__ = "0.1.0"
