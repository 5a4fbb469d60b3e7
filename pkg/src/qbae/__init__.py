"""Query-bottleneck autoencoder for unsupervised image anomaly detection.

Frozen ViT encoders feed multi-layer features through a learnable
query-token bottleneck into a lightweight transformer decoder; anomaly
maps and scores come from per-location cosine distances between the deep
features of an image and its reconstruction.
"""

__version__ = "0.1.0"

from .errors import ManifestError, TrainingDiverged, ValidationError

__all__ = ["ManifestError", "TrainingDiverged", "ValidationError", "__version__"]
