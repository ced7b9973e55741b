"""Data models for configuration, reports, and errors."""
