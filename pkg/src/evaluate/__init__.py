"""Patch inference, aggregation and the held-out metric suite."""
