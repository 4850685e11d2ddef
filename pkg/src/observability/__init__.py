"""Observability: structured logging, metrics, and run reports."""
