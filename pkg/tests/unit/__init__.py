"""Unit tests - test individual components in isolation."""
