"""Radiance-field reconstruction and metric plant phenotyping from posed images or scans."""

__version__ = "0.1.0"

from .config import SCHEMA_VERSION  # noqa: E402

__all__ = ["__version__", "SCHEMA_VERSION"]
