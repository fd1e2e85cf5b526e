"""Receding-horizon control of linear systems with probabilistic parameters,
via generalized polynomial chaos (gPC) surrogates."""

__version__ = "0.1.0"
