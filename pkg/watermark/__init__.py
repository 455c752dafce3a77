"""Entangled watermark embedding: soft nearest neighbor loss, watermark construction and training."""
