"""Unit tests for the entangled watermark embedding toolkit."""
