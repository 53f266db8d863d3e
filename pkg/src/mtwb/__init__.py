"""Transformer workbench for massive-MIMO channel estimation, CSI feedback and hybrid beamforming."""

__version__ = "0.1.0"
