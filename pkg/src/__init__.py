"""SRH skull-base tumor classification pipeline."""
