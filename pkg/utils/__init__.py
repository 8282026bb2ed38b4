"""Logging, errors, validation and seeding helpers."""
