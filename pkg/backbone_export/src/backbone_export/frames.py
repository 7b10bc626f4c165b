"""Video decoding and frame-directory handling."""
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

_FRAME_SUFFIXES = (".png", ".ppm")


class FrameError(ValueError):
    pass


def _decode_video(video, fps_cap=None):
    """Yield RGB uint8 frames in temporal order."""
    cap = cv2.VideoCapture(str(video))
    if not cap.isOpened():
        raise FrameError(f"cannot open video {video}")
    step = 1
    if fps_cap:
        src_fps = cap.get(cv2.CAP_PROP_FPS) or 0.0
        if src_fps > fps_cap:
            step = max(1, round(src_fps / fps_cap))
    try:
        index = 0
        while True:
            ok, frame = cap.read()
            if not ok:
                break
            if index % step == 0:
                yield cv2.cvtColor(frame, cv2.COLOR_BGR2RGB)
            index += 1
    finally:
        cap.release()


def video_to_frames(video, out_dir, fps_cap=None) -> int:
    """Decode a video into zero-padded PNG frames (f00000.png, ...).

    Re-running overwrites the same filenames, so a shorter second decode can
    never interleave with stale frames from a longer first one.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    for rgb in _decode_video(video, fps_cap):
        Image.fromarray(rgb).save(out_dir / f"f{count:05d}.png")
        count += 1
    if count == 0:
        raise FrameError(f"no decodable frames in {video}")
    return count


def read_frame_dir(path):
    """Load a frame directory (PNG/PPM, lexicographic order) as RGB arrays."""
    path = Path(path)
    files = sorted(p for p in path.iterdir()
                   if p.suffix.lower() in _FRAME_SUFFIXES)
    if not files:
        raise FrameError(f"no frame images in {path}")
    frames = []
    for f in files:
        with Image.open(f) as img:
            frames.append(np.asarray(img.convert("RGB"), dtype=np.uint8))
    return frames


def load_clip(path, fps_cap=None):
    """Dispatch on input type: directory of frames, or a decodable video."""
    path = Path(path)
    if path.is_dir():
        return read_frame_dir(path)
    if not path.exists():
        raise FrameError(f"input {path} does not exist")
    return list(_decode_video(path, fps_cap))
