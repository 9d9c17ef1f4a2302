"""Joint architecture and weight ensembles from a Dirichlet architecture
distribution and a cyclical SGLD weight sampler."""

__version__ = "0.1.0"
