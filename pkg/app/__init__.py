"""Models, training, synthetic languages, experiments and the CLI."""
