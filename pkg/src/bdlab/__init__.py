"""Multi-task DPO gradient-interference laboratory."""

__version__ = "0.1.0"
