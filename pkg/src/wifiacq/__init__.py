"""Wireless logical acquisition toolkit for Android-like devices."""

__version__ = "0.1.0"
