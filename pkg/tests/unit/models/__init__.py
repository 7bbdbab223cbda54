"""Model layer tests."""
