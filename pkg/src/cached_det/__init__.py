"""Context-aware chart element detection."""

__version__ = "0.1.0"
