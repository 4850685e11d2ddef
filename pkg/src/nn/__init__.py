"""Small convolutional feature extractor with hand-derived gradients."""
