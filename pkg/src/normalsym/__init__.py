"""Normal symbol calculus for pseudodifferential operators on Riemannian manifolds."""
__version__ = "0.1.0"
