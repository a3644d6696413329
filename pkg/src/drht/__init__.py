"""Deep reciprocating HDR transformation: HDR estimation, LDR correction, and evaluation."""

__version__ = "0.1.0"
