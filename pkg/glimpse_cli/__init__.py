"""Search-guided object-grounded reasoning on synthetic video episodes."""

__all__ = ["__version__"]
__version__ = "0.1.0"
