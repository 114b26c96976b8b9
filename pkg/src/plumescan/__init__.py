"""Methane plume instance detection toolkit: tiling, post-processing, QND screening and evaluation."""

__version__ = "0.1.0"
