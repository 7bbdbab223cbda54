"""Test suite for speech-to-text service."""
