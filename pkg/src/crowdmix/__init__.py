"""crowdmix: joint clustering of feature vectors and noisy pairwise worker annotations."""

__version__ = "0.1.0"
