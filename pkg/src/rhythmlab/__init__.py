"""Prosody-only spoken language identification and speech-rhythm analysis."""

__version__ = "0.1.0"
