"""Unit tests for your graph."""
