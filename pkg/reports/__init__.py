"""Bench summaries: per-cell aggregates and the validity vs speed frontier."""
