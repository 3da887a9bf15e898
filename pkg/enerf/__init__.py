"""
enerf - A differentiable radiance-field engine with joint color.

Fits view-dependent (mid) and view-independent (coarse) color branches
blended into a joint (fine) color, supervised with graded spherical-harmonic
color encodings, on synthetic oracle scenes small enough to train on a CPU.
"""

__version__ = "0.1.0"
__author__ = "Philip Orange <git@philiporange.com>"
