"""Watermark-removal and evasion attacks."""
