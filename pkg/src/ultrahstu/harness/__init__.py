"""Data generation, ingestion, configuration and the training loop."""
