"""Probability heatmaps and overlay rendering."""
