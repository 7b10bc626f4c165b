"""Batch padding, Adam, the training loop, and checkpoint serialization."""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model
from .dataio import FeatureSequence
from .model import ModelConfig, ModelError, PaddedBatch

CKPT_MAGIC = b"CSEQCKPT"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sII")


class TrainError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 16
    epochs: int = 30
    grad_clip_norm: float = 1.0  # 0 disables clipping
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise TrainError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise TrainError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise TrainError(f"epochs must be >= 1, got {self.epochs}")
        if self.grad_clip_norm < 0:
            raise TrainError(f"grad_clip_norm must be >= 0, got {self.grad_clip_norm}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise TrainError("betas must lie in [0, 1)")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(m={k: np.zeros(p.shape, dtype=np.float64) for k, p in params.items()},
                   v={k: np.zeros(p.shape, dtype=np.float64) for k, p in params.items()})


def pad_batch(seqs) -> PaddedBatch:
    """Zero-pad feature sequences to the longest length in the batch."""
    seqs = list(seqs)
    if not seqs:
        raise TrainError("pad_batch: empty batch")
    dims = {s.dim for s in seqs}
    if len(dims) != 1:
        raise TrainError(f"pad_batch: mixed feature dims {sorted(dims)}")
    lengths = np.array([s.num_frames for s in seqs], dtype=np.int64)
    t_max = int(lengths.max())
    feats = np.zeros((len(seqs), t_max, dims.pop()), dtype=np.float32)
    mask = np.zeros((len(seqs), t_max), dtype=bool)
    for i, s in enumerate(seqs):
        feats[i, : s.num_frames] = s.data
        mask[i, : s.num_frames] = True
    return PaddedBatch(features=feats, mask=mask, lengths=lengths)


def global_grad_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values())))


def adam_step(params, grads, state: AdamState, config: TrainConfig, step_index: int):
    """One Adam update with bias correction; clips by global norm first.

    Mutates state in place; parameters are replaced with fresh float32 arrays.
    Returns (params, state).
    """
    if step_index < 1:
        raise TrainError(f"step_index must be >= 1, got {step_index}")
    clip_scale = 1.0
    if config.grad_clip_norm > 0:
        norm = global_grad_norm(grads)
        if norm > config.grad_clip_norm:
            clip_scale = config.grad_clip_norm / norm
    bc1 = 1.0 - config.beta1 ** step_index
    bc2 = 1.0 - config.beta2 ** step_index
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64) * clip_scale
        if g.shape != p.shape:
            raise TrainError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * np.square(g)
        update = config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.epsilon)
        new_p = p.astype(np.float64) - update
        if not np.all(np.isfinite(new_p)):
            raise TrainError(f"non-finite update for {name}")
        params[name] = new_p.astype(np.float32)
    return params, state


def _epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    # counter-based generator keyed on (seed, epoch): data order stays
    # independent of how many dropout draws each batch consumed
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, epoch, 0x0DE])))
    return gen.permutation(n)


def predict_logits(params, config: ModelConfig, seqs, batch_size: int = 16) -> np.ndarray:
    """Inference logits for a list of FeatureSequence, in input order."""
    out = []
    for start in range(0, len(seqs), batch_size):
        batch = pad_batch(seqs[start : start + batch_size])
        out.append(model.forward(batch, params, config, training=False))
    return np.concatenate(out, axis=0)


def predict(params, config: ModelConfig, seqs, batch_size: int = 16) -> np.ndarray:
    """Argmax class per clip; ties resolve to class 0."""
    logits = predict_logits(params, config, seqs, batch_size)
    return (logits[:, 1] > logits[:, 0]).astype(np.int64)


def fit_scaler(seqs):
    """Per-dimension mean/std over every frame of the given sequences.

    Raw extractor features ride on large constant offsets (global pooling of
    rectified responses), which would leave the encoder operating on a nearly
    constant vector; standardizing with train-set statistics removes that.
    """
    rows = np.concatenate([np.asarray(s.data, dtype=np.float64) for s in seqs])
    mean = rows.mean(axis=0).astype(np.float32)
    std = np.maximum(rows.std(axis=0), 1e-6).astype(np.float32)
    return mean, std


def apply_scaler(seqs, mean, std):
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    return [FeatureSequence(clip_id=s.clip_id, data=(s.data - mean) / std)
            for s in seqs]


def fit(train_set, val_set, model_config: ModelConfig, train_config: TrainConfig):
    """Train with Adam; keep the parameters from the best-val-accuracy epoch.

    train_set/val_set are lists of (FeatureSequence, label) pairs. Features
    are standardized per dimension with train-set statistics (stored in the
    returned history under "scaler"; evaluation must apply the same
    transform). Returns (params, history) where history has per-epoch
    train_loss and val_accuracy plus the selected best_epoch. Deterministic
    for a fixed seed in single-threaded mode.
    """
    if not train_set:
        raise TrainError("fit: empty train set")
    for _, label in list(train_set) + list(val_set or []):
        if label not in (0, 1):
            raise TrainError(f"label must be 0 or 1, got {label!r}")

    scaler_mean, scaler_std = fit_scaler([s for s, _ in train_set])
    train_set = list(zip(apply_scaler([s for s, _ in train_set], scaler_mean, scaler_std),
                         [l for _, l in train_set]))
    if val_set:
        val_set = list(zip(apply_scaler([s for s, _ in val_set], scaler_mean, scaler_std),
                           [l for _, l in val_set]))

    params = model.init_params(model_config, train_config.seed)
    state = AdamState.for_params(params)
    dropout_rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence([train_config.seed, 0xD120])))
    history = {"train_loss": [], "val_accuracy": [], "best_epoch": 0,
               "scaler": {"mean": [float(v) for v in scaler_mean],
                          "std": [float(v) for v in scaler_std]}}
    best_acc = -1.0
    best_params = {k: p.copy() for k, p in params.items()}
    n = len(train_set)
    step = 0

    for epoch in range(train_config.epochs):
        if train_config.shuffle:
            order = _epoch_order(n, train_config.seed, epoch)
        else:
            order = np.arange(n)
        loss_sum = 0.0
        for start in range(0, n, train_config.batch_size):
            idx = order[start : start + train_config.batch_size]
            batch = pad_batch([train_set[j][0] for j in idx])
            labels = np.array([train_set[j][1] for j in idx])
            try:
                loss, grads, _ = model.loss_and_gradients(
                    batch, labels, params, model_config, training=True, rng=dropout_rng)
            except ModelError as err:
                raise TrainError(
                    f"epoch {epoch} batch {start // train_config.batch_size}: {err}") from err
            step += 1
            params, state = adam_step(params, grads, state, train_config, step)
            loss_sum += loss * len(idx)
        history["train_loss"].append(loss_sum / n)

        if val_set:
            preds = predict(params, model_config, [s for s, _ in val_set],
                            train_config.batch_size)
            acc = float(np.mean(preds == np.array([l for _, l in val_set])))
            history["val_accuracy"].append(acc)
            if acc > best_acc:  # ties keep the earlier epoch
                best_acc = acc
                history["best_epoch"] = epoch
                best_params = {k: p.copy() for k, p in params.items()}

    if not val_set:
        history["best_epoch"] = train_config.epochs - 1
        best_params = params
    return best_params, history


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    metadata: dict = field(default_factory=dict)
    format_version: int = CKPT_VERSION


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Magic, version, JSON header (config + tensor index), raw f32 LE payloads."""
    index = []
    payloads = []
    offset = 0
    for name, p in ckpt.params.items():
        arr = np.ascontiguousarray(np.asarray(p, dtype=np.float32))
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "config": dataclasses.asdict(ckpt.config),
        "metadata": ckpt.metadata,
        "tensors": index,
    }
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CKPT_MAGIC, ckpt.format_version, len(blob)))
        fh.write(blob)
        for chunk in payloads:
            fh.write(chunk)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    magic, version, header_len = _CKPT_HEADER.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if len(raw) < _CKPT_HEADER.size + header_len:
        raise CheckpointError(f"{path}: truncated JSON header")
    try:
        header = json.loads(raw[_CKPT_HEADER.size : _CKPT_HEADER.size + header_len])
    except ValueError as err:
        raise CheckpointError(f"{path}: unreadable header: {err}") from err
    try:
        config = ModelConfig(**header["config"])
    except (TypeError, KeyError, ModelError) as err:
        raise CheckpointError(f"{path}: bad config: {err}") from err

    payload = raw[_CKPT_HEADER.size + header_len :]
    expected = model.param_shapes(config)
    params = {}
    total = 0
    for entry in header.get("tensors", []):
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        if name not in expected or expected[name] != shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} shape {shape} disagrees with config")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated payload for tensor {name!r}")
        params[name] = np.frombuffer(
            payload, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
        total += nbytes
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    if total != len(payload):
        raise CheckpointError(
            f"{path}: payload size {len(payload)} does not match index total {total}")
    return Checkpoint(config=config, params=params,
                      metadata=header.get("metadata", {}), format_version=version)
