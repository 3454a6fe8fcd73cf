"""Federated learning simulator: FedAvg, data sharing and LoAdaBoost."""

__version__ = "0.1.0"
