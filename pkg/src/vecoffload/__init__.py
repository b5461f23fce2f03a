"""Vehicular offloading simulator with learned split ratios and GPR-guided
resource reservation."""

__version__ = "0.1.0"
