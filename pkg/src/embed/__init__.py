"""Patch embeddings and exact tSNE."""
