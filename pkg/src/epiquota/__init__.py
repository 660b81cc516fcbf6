"""Metapopulation epidemic simulation over OD mobility with learned quota control."""

__version__ = "0.1.0"
