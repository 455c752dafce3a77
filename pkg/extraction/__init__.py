"""Model extraction by retraining on victim labels."""
