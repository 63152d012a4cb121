"""Minimal numpy neural-network engine."""
