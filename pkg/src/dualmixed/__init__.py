"""Dual mixed volumes of star bodies in cotangent bundles."""
__version__ = "0.1.0"
