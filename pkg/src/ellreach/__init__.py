"""Ellipsoidal under- and over-approximations of reachable sets of linear time-varying systems."""

__version__ = "0.1.0"
