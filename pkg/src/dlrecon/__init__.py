"""Antenna orientation reconstruction and full downlink channel inference
for massive MIMO uplinks."""

__version__ = "0.1.0"
