"""JPEG-domain steganalysis with graph attention and feature enhancement."""

__version__ = "0.1.0"
