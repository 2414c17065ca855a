"""Point-cloud domain adaptation with contrastive learning and optimal transport."""

__version__ = "0.1.0"
