"""Common utilities package: tensor engine, optimizers, configuration and run artifacts."""

__version__ = "0.3.0"
