"""Source-free detection adaptation with a frozen foundation-encoder branch."""

__version__ = "0.1.0"
