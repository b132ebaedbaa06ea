"""Single-image geometric detail recovery with neural signed distance fields."""

__version__ = "0.1.0"
