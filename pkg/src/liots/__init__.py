"""Federated IoT context exchange: context managers, discovery, brokers,
a privacy-preserving registrar and a two-scope security layer."""

__version__ = "0.1.0"
