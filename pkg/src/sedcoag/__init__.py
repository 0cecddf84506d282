"""Numerical solver and verification harness for coagulation with sedimentation."""

__version__ = "0.1.0"
