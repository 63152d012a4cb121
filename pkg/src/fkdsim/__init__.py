"""Desk-scale simulator for federated knowledge distillation with a FedAvg baseline."""

__version__ = "0.1.0"
