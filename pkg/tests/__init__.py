"""Test suite for blocklab."""
