"""dynrecon: desk-scale monocular 4D Gaussian reconstruction engine."""

__version__ = "0.1.0"
