"""Twin-experiment driver: configuration, truth generation, metrics, CLI."""
