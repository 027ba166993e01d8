"""Risk-sensitive mean-field-type control toolkit."""

__version__ = "0.1.0"
