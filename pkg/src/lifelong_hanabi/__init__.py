"""Lifelong-learning benchmark built on cooperative two-player Hanabi."""

__version__ = "0.1.0"
