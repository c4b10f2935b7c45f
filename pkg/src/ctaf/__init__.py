"""Cross-temporal attention fusion for asynchronous EEG and physiology streams."""

__version__ = "0.1.0"
