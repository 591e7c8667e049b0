"""Bone-abnormality detection on radiographs with a YOLOv7-style detector."""

__version__ = "0.1.0"
