"""crashseq: video-level accident detection on surveillance clips.

Spatial frame features and dense optical-flow motion cues are assembled into
four input modalities and classified per video by a masked transformer
encoder with temporal mean pooling.
"""

__version__ = "0.1.0"
