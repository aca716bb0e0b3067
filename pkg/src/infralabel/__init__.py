"""Label-free roadside perception pipeline on a synthetic town."""

__version__ = "0.1.0"
