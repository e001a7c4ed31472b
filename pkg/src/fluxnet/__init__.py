"""Neural-network surrogates for assembly axial flux profiles, with Monte
Carlo Dropout and variational Bayesian uncertainty estimates."""

__version__ = "0.1.0"
