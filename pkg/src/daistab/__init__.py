"""Stability certificates and simulation for distributed averaging integral
frequency control under communication delays and switching topologies."""

__version__ = "0.1.0"
