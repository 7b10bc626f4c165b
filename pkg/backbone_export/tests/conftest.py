import numpy as np
import pytest
from PIL import Image


def _synthetic_frame(rng, t, h=72, w=96):
    """Structured test frame: gradient background plus a drifting square."""
    yy, xx = np.mgrid[0:h, 0:w]
    img = np.stack([
        (xx * 255 / w), (yy * 255 / h), np.full((h, w), 40 + 3 * t),
    ], axis=-1).astype(np.uint8)
    x0 = 5 + 2 * t
    img[20:36, x0:x0 + 16] = rng.integers(0, 255, size=3)
    return img


@pytest.fixture(scope="session")
def clip_30(tmp_path_factory):
    """A 30-frame fixture clip as a frame directory."""
    root = tmp_path_factory.mktemp("clip30")
    rng = np.random.default_rng(17)
    for t in range(30):
        Image.fromarray(_synthetic_frame(rng, t)).save(root / f"f{t:05d}.png")
    return root
