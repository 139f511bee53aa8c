"""5-year colorectal cancer risk from slides and clinical records."""

__version__ = "0.1.0"
