"""Ownership verification statistics."""
