"""Configuration layer tests."""
