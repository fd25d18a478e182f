"""cine_sr module."""
