"""Graph federated learning with privatized server-to-server communication."""

__version__ = "0.1.0"
