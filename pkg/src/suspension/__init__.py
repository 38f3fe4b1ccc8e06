"""Dilute suspensions of rigid axisymmetric particles in Stokes flow."""

__version__ = "0.1.0"
