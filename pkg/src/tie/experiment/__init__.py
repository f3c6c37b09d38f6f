"""Configured runs: config schema, artifact formats and the ``tie`` command line."""
