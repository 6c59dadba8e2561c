"""Automatic music transcription as conditional diffusion over piano rolls."""

__version__ = "0.1.0"
