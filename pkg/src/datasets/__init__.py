"""Dataset splits, preprocessing, synthetic data, and the dataset registry."""
