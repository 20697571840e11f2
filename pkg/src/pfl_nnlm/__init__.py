"""Private federated training of large-vocabulary feedforward language models."""

__version__ = "0.1.0"
