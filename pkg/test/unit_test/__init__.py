"""Unit tests for the sound machine application."""
