"""Desk-scale federated-learning simulator with backdoor attacks, robust
aggregation baselines, and a partial-layer aggregation defense that keeps
every client's classifier layers local."""

__version__ = "0.1.0"
