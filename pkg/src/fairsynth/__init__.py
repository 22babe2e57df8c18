"""Fair, differentially private synthesis of tabular data."""

__version__ = "0.1.0"
