"""Tests for protoprompt."""
