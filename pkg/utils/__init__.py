"""Shared helpers: artifact store, CSV/Excel/PDF exports and vector charts."""
