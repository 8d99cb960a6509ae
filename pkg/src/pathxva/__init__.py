"""Path-dependent XVA via anticipated BSDEs and neural regression."""
__version__ = "0.1.0"
