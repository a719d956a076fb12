"""Command line, config files, corpus ingestion, experiment matrix and reports."""
