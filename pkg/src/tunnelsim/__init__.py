"""Headless tunnel-vision simulator and gaze analytics toolkit."""

__version__ = "0.1.0"
