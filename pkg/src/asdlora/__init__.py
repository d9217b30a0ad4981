"""Anomalous machine-sound detection with LoRA-tuned transformer encoders, in numpy."""

__version__ = "0.1.0"
