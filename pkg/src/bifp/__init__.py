"""Self-supervised video representations from bidirectional feature prediction."""

__version__ = "0.1.0"
