"""Thermal-loop toolkit: simulated TEC plant, GRU predictors, swarm MPC."""

__version__ = "0.1.0"
