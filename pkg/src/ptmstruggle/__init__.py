"""Struggling-student prediction with taxonomy-based proficiency profiles."""

__version__ = "0.1.0"
