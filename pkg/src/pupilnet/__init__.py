"""Joint pupil segmentation and ellipse regression for visible-light pupillometry."""

__version__ = "0.1.0"

SCHEMA_VERSION = 1
