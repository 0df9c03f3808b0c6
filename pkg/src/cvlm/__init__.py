"""Desk-scale vision-language model with knowledge alignment and injection into a toy host LM."""

__version__ = "0.1.0"
