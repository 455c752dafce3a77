"""Model specifications, forward passes with activation capture, and the model file format."""
