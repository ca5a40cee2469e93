"""Continual thermal-infrared restoration with group-expanded U-Nets,
structural-entropy pruning and sub-degradation knowledge mining."""

__version__ = "0.1.0"
