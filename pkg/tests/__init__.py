"""Tests for revformer."""
