"""Semantic point-cloud embeddings from instance-segmented 3D scenes."""

__version__ = "0.1.0"
