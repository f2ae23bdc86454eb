"""Recurrent regression tracker: LSTM over visual features plus region hints."""

__version__ = "0.1.0"
