"""Cross-entropy and contrastive training objectives."""
