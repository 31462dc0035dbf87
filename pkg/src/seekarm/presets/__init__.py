"""Shipped experiment presets (YAML)."""
