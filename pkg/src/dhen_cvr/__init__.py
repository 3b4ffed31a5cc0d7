"""Multitask conversion-rate prediction with hierarchical ensembles of crossing modules."""

__version__ = "0.1.0"
