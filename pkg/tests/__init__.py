"""Tests for uvdnerf."""
