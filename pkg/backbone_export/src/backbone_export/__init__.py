"""Export pretrained-backbone frame features to AVFX feature files."""
from .avfx import AvfxError, read_avfx, write_avfx
from .export import (
    BACKBONE_DIMS,
    ExportError,
    ExportJob,
    export_features,
    load_backbone,
)
from .frames import FrameError, read_frame_dir, video_to_frames

__all__ = [
    "AvfxError", "read_avfx", "write_avfx",
    "BACKBONE_DIMS", "ExportError", "ExportJob", "export_features",
    "load_backbone",
    "FrameError", "read_frame_dir", "video_to_frames",
]
