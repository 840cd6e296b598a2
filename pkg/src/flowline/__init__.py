"""Flowline: desk-scale CI/CD orchestration with an embedded IaC provisioner."""

__version__ = "0.1.0"
