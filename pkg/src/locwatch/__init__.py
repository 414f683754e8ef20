"""Queue-driven backend for high-frequency location ingestion and alarm fan-out."""

__version__ = "0.1.0"
