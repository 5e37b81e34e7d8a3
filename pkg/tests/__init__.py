"""Tests for SkimRead."""
