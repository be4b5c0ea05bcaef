"""Shipped run presets (``<name>.cfg``), listed by ``main.py presets``."""
