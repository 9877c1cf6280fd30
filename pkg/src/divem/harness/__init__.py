"""Command-line harness: configs, datasets, experiments and plots."""
