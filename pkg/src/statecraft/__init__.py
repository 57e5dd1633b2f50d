"""statecraft: a numpy training engine for transfer-learned state recognition."""

__version__ = "0.1.0"
