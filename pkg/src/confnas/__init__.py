"""Composable gradient-based one-shot architecture search and its benchmark suite."""

__version__ = "0.1.0"
