"""Query2Label-style multi-label classification on a from-scratch autograd core."""
__version__ = "0.1.0"
