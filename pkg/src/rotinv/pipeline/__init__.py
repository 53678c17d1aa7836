"""End-to-end reconstruction: data loading, both optimization stages, relighting, metrics and the CLI."""
