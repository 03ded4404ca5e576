"""Desk-scale first-frame-guided video editing engine."""
