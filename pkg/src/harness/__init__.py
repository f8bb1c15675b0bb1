"""Experiment harness: configuration, batch orchestration, persistence and CLI."""
