"""stutterlab: desk-scale joint ASR + stuttering-event-detection on synthetic speech."""

__version__ = "0.1.0"
