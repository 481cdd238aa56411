"""Cover-track retrieval pipeline: feature interchange, vocal segmentation,
a trainable pooling/projection encoder distilled onto a fixed text-embedding
space, exhaustive cosine ranking, and retrieval/statistics evaluation."""

__version__ = "0.1.0"
