"""Virtual 3-channel images, tiling, patch filtering and augmentation."""
