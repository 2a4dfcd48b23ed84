"""Image-folder to XMAB embedding-bundle exporter."""

__version__ = "0.1.0"
