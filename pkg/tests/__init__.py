"""Tests for fpt-plus."""
