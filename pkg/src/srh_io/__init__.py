"""Slide I/O, manifests, patient splits and the synthetic cohort."""
