"""Desk-scale caption training and evaluation: a miniature conditional decoder
trained by self-critical sequence training, plus a reference metric stack."""

__version__ = "0.1.0"
