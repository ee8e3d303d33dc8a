"""Cooperative market making at desk scale: probe, distill, fuse, backtest."""

__version__ = "0.1.0"
