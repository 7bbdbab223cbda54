"""Controller layer for HTTP endpoints."""
