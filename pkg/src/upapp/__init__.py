"""Unsupervised annotation of GPS stops with visited place categories."""

__version__ = "0.1.0"
