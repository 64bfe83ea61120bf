"""Teacher cache, checkpoints, and results persistence."""
