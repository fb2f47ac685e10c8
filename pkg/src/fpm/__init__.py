"""fpm: a small purely functional package manager."""

__version__ = "0.1.0"
