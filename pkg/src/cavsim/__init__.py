"""Discrete-event simulation of DSRC and mm-wave connected vehicle networks."""

__version__ = "0.1.0"
