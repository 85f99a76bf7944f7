"""Desk-scale workbench for robust multi-agent traffic-signal control on a
3x3 grid: microsimulation, demand scenarios, policy-gradient training of
signal controllers and a worst-case demand estimator, and evaluation."""

__version__ = "0.1.0"
