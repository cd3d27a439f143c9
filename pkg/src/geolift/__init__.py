"""geolift: GIS map lifting, camera resectioning, and geometric context features."""

__version__ = "0.1.0"
