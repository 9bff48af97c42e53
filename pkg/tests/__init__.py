"""Tests for respbin package."""
