"""Tests for the LC-Net engine."""
