"""Tabular laboratory for multistep off-policy operators with history-dependent traces."""

__version__ = "0.1.0"
