"""Full simulation runs through the pipeline, CLI and scenarios."""
