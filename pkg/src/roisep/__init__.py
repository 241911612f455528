"""Area-based source separation toolkit for a two-microphone linear array."""

__version__ = "0.1.0"
