"""Bot detection on dynamic social graphs with structural and temporal attention."""

__version__ = "0.1.0"
