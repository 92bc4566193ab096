"""Tests for multisk."""
