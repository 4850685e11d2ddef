"""Optimizers, samplers, checkpoints and training loops."""
