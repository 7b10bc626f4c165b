"""Stride-sample a clip and export backbone penultimate features to AVFX."""
import dataclasses
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torchvision import models

from .avfx import write_avfx
from .frames import load_clip

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
TARGET_SIZE = 224

# penultimate feature widths, with the classifier head removed
BACKBONE_DIMS = {
    "resnet50": 2048,
    "densenet201": 1920,
    "efficientnet_b0": 1280,
}


class ExportError(RuntimeError):
    pass


@dataclasses.dataclass
class ExportJob:
    input: Path
    out: Path
    backbone: str = "resnet50"
    stride: int = 5
    weights: str = "pretrained"  # or "random" (seeded, untrained)
    seed: int = 0
    batch_size: int = 8
    device: str = "cpu"
    fps_cap: float | None = None

    def __post_init__(self):
        if self.backbone not in BACKBONE_DIMS:
            raise ExportError(f"unknown backbone {self.backbone!r}; "
                              f"choose from {sorted(BACKBONE_DIMS)}")
        if self.stride < 1:
            raise ExportError(f"stride must be >= 1, got {self.stride}")
        if self.weights not in ("pretrained", "random"):
            raise ExportError(f"weights must be 'pretrained' or 'random', "
                              f"got {self.weights!r}")


def load_backbone(name: str, weights: str = "pretrained", seed: int = 0,
                  device: str = "cpu"):
    """Return (eval-mode module with head removed, feature dim)."""
    dim = BACKBONE_DIMS[name]
    if weights == "pretrained":
        try:
            net = models.get_model(name, weights="DEFAULT")
        except Exception as err:
            raise ExportError(
                f"could not obtain pretrained {name} weights ({err}); "
                f"pass weights='random' for a seeded untrained backbone"
            ) from err
    else:
        torch.manual_seed(seed)
        net = models.get_model(name, weights=None)
    if name == "resnet50":
        net.fc = torch.nn.Identity()
    else:  # densenet201 / efficientnet_b0 keep pooling, drop the classifier
        net.classifier = torch.nn.Identity()
    net.eval()
    return net.to(device), dim


def preprocess(frames) -> torch.Tensor:
    """RGB uint8 frames -> N x 3 x 224 x 224 normalized float tensor."""
    mean = np.asarray(IMAGENET_MEAN, dtype=np.float32)
    std = np.asarray(IMAGENET_STD, dtype=np.float32)
    out = np.empty((len(frames), 3, TARGET_SIZE, TARGET_SIZE), dtype=np.float32)
    for i, frame in enumerate(frames):
        img = Image.fromarray(frame).resize((TARGET_SIZE, TARGET_SIZE),
                                            Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
        out[i] = ((arr - mean) / std).transpose(2, 0, 1)
    return torch.from_numpy(out)


def export_features(job: ExportJob) -> Path:
    """Run the job; returns the written AVFX path.

    T = ceil(frame_count / stride) with offset-0 sampling, matching the
    consumer's frame-sampling semantics.
    """
    frames = load_clip(job.input, job.fps_cap)
    sampled = frames[::job.stride]
    net, dim = load_backbone(job.backbone, job.weights, job.seed, job.device)
    batches = []
    with torch.inference_mode():
        for start in range(0, len(sampled), job.batch_size):
            chunk = preprocess(sampled[start:start + job.batch_size])
            feats = net(chunk.to(job.device))
            batches.append(feats.cpu().numpy().astype(np.float32))
    features = np.concatenate(batches, axis=0)
    if features.shape != (len(sampled), dim):
        raise ExportError(f"backbone emitted {features.shape}, "
                          f"expected {(len(sampled), dim)}")
    write_avfx(features, job.out)
    return Path(job.out)
