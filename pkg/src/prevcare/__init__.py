"""Budget-constrained allocation of preventive treatments."""
__version__ = "0.1.0"
