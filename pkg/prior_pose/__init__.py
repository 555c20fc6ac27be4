"""Category-level 9DoF pose fitting with shape priors and symmetry-aware losses."""

__version__ = "0.1.0"
