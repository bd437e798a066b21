"""Single-shot face detection with dual-shot pyramid anchors, dense context
prediction modules and multi-task supervision."""

from facedet.config import DetectorConfig

__all__ = ["DetectorConfig"]
__version__ = "0.1.0"
