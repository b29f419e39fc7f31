"""Tests for the relocalization pipeline."""
