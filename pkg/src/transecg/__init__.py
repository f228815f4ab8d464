"""ECG preprocessing, delineation, transformer classification and attention attribution."""

__version__ = "0.1.0"
