"""Controller layer tests."""
