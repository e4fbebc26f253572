"""Reproduction scripts for the trend experiments."""
