"""End-to-end tests for the commands."""
