"""Bluetooth firmware patching and link-layer experimentation toolkit."""

__version__ = "0.1.0"
