"""Transformer sequence classifier over per-frame feature vectors.

Linear projection -> sinusoidal positional encoding -> post-norm encoder
stack with padding-masked multi-head self-attention -> masked temporal mean
pooling -> linear head -> softmax / cross-entropy.

Forward and reverse passes are written out by hand in numpy. Parameters are
canonically float32 (that is what checkpoints serialize); all math runs in
float64 so analytic gradients can be checked against central finite
differences to tight tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_LN_EPS = 1e-5


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_dim: int = 2048
    d_model: int = 512
    num_layers: int = 3
    num_heads: int = 8
    ffn_dim: int = 0  # 0 -> 4 * d_model
    dropout_rate: float = 0.1
    num_classes: int = 2
    max_len: int = 512

    def __post_init__(self):
        if self.ffn_dim == 0:
            self.ffn_dim = 4 * self.d_model
        if self.d_model % self.num_heads != 0:
            raise ModelError(
                f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if self.num_classes != 2:
            raise ModelError(f"num_classes is fixed at 2, got {self.num_classes}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ModelError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        for name in ("input_dim", "d_model", "num_layers", "num_heads", "ffn_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads


@dataclass
class PaddedBatch:
    """Batch of feature sequences padded to a common length.

    mask row i has exactly lengths[i] leading true values; padded feature
    rows are all-zero.
    """
    features: np.ndarray  # B x T_max x D
    mask: np.ndarray      # B x T_max, bool
    lengths: np.ndarray   # B

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if self.features.ndim != 3 or self.mask.shape != self.features.shape[:2]:
            raise ModelError(
                f"inconsistent batch shapes {self.features.shape} / {self.mask.shape}")
        if self.lengths.shape != (self.features.shape[0],):
            raise ModelError("lengths must have one entry per clip")
        if np.any(self.mask.sum(axis=1) != self.lengths):
            raise ModelError("mask rows must have exactly lengths[i] true values")


def param_shapes(config: ModelConfig) -> dict:
    """Canonical tensor-name -> shape map; dict order is the serialization order."""
    dm, dfn = config.d_model, config.ffn_dim
    shapes = {"W_p": (dm, config.input_dim), "b_p": (dm,)}
    for i in range(config.num_layers):
        pre = f"layers.{i}."
        for name in ("Q", "K", "V", "O"):
            shapes[pre + f"W_{name}"] = (dm, dm)
            shapes[pre + f"b_{name}"] = (dm,)
        shapes[pre + "W_1"] = (dfn, dm)
        shapes[pre + "b_1"] = (dfn,)
        shapes[pre + "W_2"] = (dm, dfn)
        shapes[pre + "b_2"] = (dm,)
        for ln in ("ln1", "ln2"):
            shapes[pre + f"{ln}_gamma"] = (dm,)
            shapes[pre + f"{ln}_beta"] = (dm,)
    shapes["W_c"] = (config.num_classes, dm)
    shapes["b_c"] = (config.num_classes,)
    return shapes


def init_params(config: ModelConfig, seed: int = 0) -> dict:
    """Seeded float32 parameter dict in canonical order.

    Weight matrices use Glorot scaling sqrt(2/(fan_in+fan_out)) so each
    sublayer contributes at the same order as its residual stream; the
    classifier head starts near zero so initial logits are near-uniform.
    Biases are zero, layer-norm gains one.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    params = {}
    for name, shape in param_shapes(config).items():
        base = name.rsplit(".", 1)[-1]
        if base.endswith("_gamma"):
            params[name] = np.ones(shape, dtype=np.float32)
        elif base.startswith("b_") or base.endswith("_beta"):
            params[name] = np.zeros(shape, dtype=np.float32)
        elif name == "W_c":
            params[name] = rng.normal(0.0, 0.02, size=shape).astype(np.float32)
        else:
            std = np.sqrt(2.0 / (shape[0] + shape[1]))
            params[name] = rng.normal(0.0, std, size=shape).astype(np.float32)
    return params


def positional_encoding(T: int, d_model: int) -> np.ndarray:
    """PE[t, 2i] = sin(t / 10000^(2i/d)), PE[t, 2i+1] = cos(...); t from 0."""
    t = np.arange(T, dtype=np.float64)[:, None]
    i2 = np.arange(0, d_model, 2, dtype=np.float64)
    angle = t / np.power(10000.0, i2 / d_model)
    pe = np.zeros((T, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


def project(batch, params) -> np.ndarray:
    """z_t = W_p x_t + b_p for every position (padded rows masked later)."""
    W_p = np.asarray(params["W_p"], dtype=np.float64)
    x = np.asarray(batch.features, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != W_p.shape[1]:
        raise ModelError(
            f"feature dim mismatch: batch {x.shape} vs W_p {W_p.shape}")
    return x @ W_p.T + np.asarray(params["b_p"], dtype=np.float64)


def _dropout_mask(shape, rate: float, rng) -> np.ndarray:
    if rng is None:
        raise ModelError("training-mode dropout requires an rng")
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _layer_norm(x: np.ndarray, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma)


def _layer_norm_backward(dy: np.ndarray, ln_cache):
    xhat, inv_std, gamma = ln_cache
    dgamma = (dy * xhat).sum(axis=(0, 1))
    dbeta = dy.sum(axis=(0, 1))
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv_std * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


def _masked_softmax(scores: np.ndarray, key_mask: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with -inf at padded key columns.

    Rows whose keys are all padded come out exactly zero instead of NaN.
    """
    s = np.where(key_mask[:, None, None, :], scores, -np.inf)
    row_max = s.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.exp(s - row_max)
    denom = e.sum(axis=-1, keepdims=True)
    return e / np.maximum(denom, 1e-300)


def _split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    B, T, dm = x.shape
    return x.reshape(B, T, num_heads, dm // num_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    B, H, T, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dk)


def encoder_forward(z_prime: np.ndarray, mask: np.ndarray, params, config: ModelConfig,
                    training: bool = False, rng=None, cache=None) -> np.ndarray:
    """Post-norm encoder stack; padded rows of the result are zeroed.

    Each block: x <- LN(x + Dropout(MHA(x))); x <- LN(x + Dropout(FFN(x))),
    with attention logits of padded key columns set to -inf.
    """
    x = np.asarray(z_prime, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    B, T, dm = x.shape
    scale = 1.0 / np.sqrt(config.head_dim)
    p = config.dropout_rate if training else 0.0
    layer_caches = []

    def f64(name):
        return np.asarray(params[name], dtype=np.float64)

    for i in range(config.num_layers):
        pre = f"layers.{i}."
        lc = {"x_in": x}
        q = x @ f64(pre + "W_Q").T + f64(pre + "b_Q")
        k = x @ f64(pre + "W_K").T + f64(pre + "b_K")
        v = x @ f64(pre + "W_V").T + f64(pre + "b_V")
        qh, kh, vh = (_split_heads(a, config.num_heads) for a in (q, k, v))
        scores = qh @ kh.swapaxes(-1, -2) * scale
        probs = _masked_softmax(scores, mask)
        attn = _merge_heads(probs @ vh)
        out = attn @ f64(pre + "W_O").T + f64(pre + "b_O")
        drop_a = _dropout_mask(out.shape, p, rng) if p > 0.0 else None
        if drop_a is not None:
            out = out * drop_a
        y1, ln1 = _layer_norm(x + out, f64(pre + "ln1_gamma"), f64(pre + "ln1_beta"))

        f1 = y1 @ f64(pre + "W_1").T + f64(pre + "b_1")
        relu = np.maximum(f1, 0.0)
        f2 = relu @ f64(pre + "W_2").T + f64(pre + "b_2")
        drop_f = _dropout_mask(f2.shape, p, rng) if p > 0.0 else None
        if drop_f is not None:
            f2 = f2 * drop_f
        y2, ln2 = _layer_norm(y1 + f2, f64(pre + "ln2_gamma"), f64(pre + "ln2_beta"))

        lc.update(qh=qh, kh=kh, vh=vh, probs=probs, attn=attn, drop_a=drop_a,
                  ln1=ln1, y1=y1, f1=f1, relu=relu, drop_f=drop_f, ln2=ln2)
        layer_caches.append(lc)
        x = y2

    h = x * mask[:, :, None]
    if not np.all(np.isfinite(h)):
        raise ModelError("non-finite activations in encoder stack")
    if cache is not None:
        cache["layers"] = layer_caches
        cache["mask"] = mask
        cache["scale"] = scale
    return h


def masked_mean_pool(h: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mean of rows where mask is true; divisor is the valid count, not T_max."""
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ModelError("masked_mean_pool: a clip has no valid frames")
    h = np.asarray(h, dtype=np.float64)
    return (h * mask[:, :, None]).sum(axis=1) / counts[:, None]


def classify(h_video: np.ndarray, params) -> np.ndarray:
    W_c = np.asarray(params["W_c"], dtype=np.float64)
    b_c = np.asarray(params["b_c"], dtype=np.float64)
    return np.asarray(h_video, dtype=np.float64) @ W_c.T + b_c


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ModelError(f"labels shape {labels.shape} does not match logits")
    if np.any((labels < 0) | (labels >= logits.shape[1])):
        raise ModelError(f"label out of range for {logits.shape[1]} classes")
    ls = log_softmax(logits)
    return float(-ls[np.arange(labels.shape[0]), labels].mean())


def forward(batch, params, config: ModelConfig, training: bool = False,
            rng=None, cache=None) -> np.ndarray:
    """Full pipeline to logits; deterministic when training is false."""
    x = np.asarray(batch.features, dtype=np.float64)
    mask = np.asarray(batch.mask, dtype=bool)
    B, T, _ = x.shape
    if T > config.max_len:
        raise ModelError(f"sequence length {T} exceeds max_len {config.max_len}")
    z = project(batch, params)
    zp = z + positional_encoding(T, config.d_model)[None]
    p = config.dropout_rate if training else 0.0
    drop_in = _dropout_mask(zp.shape, p, rng) if p > 0.0 else None
    if drop_in is not None:
        zp = zp * drop_in
    enc_cache = {} if cache is not None else None
    h = encoder_forward(zp, mask, params, config, training=training, rng=rng,
                        cache=enc_cache)
    pooled = masked_mean_pool(h, mask)
    logits = classify(pooled, params)
    if cache is not None:
        cache.update(x=x, drop_in=drop_in, enc=enc_cache, h=h, pooled=pooled,
                     logits=logits)
    return logits


def loss_and_gradients(batch, labels, params, config: ModelConfig,
                       training: bool = False, rng=None):
    """Cross-entropy loss plus exact reverse-mode gradients for every tensor.

    Returns (loss, grads, logits); grads is float64 keyed like params.
    """
    cache = {}
    logits = forward(batch, params, config, training=training, rng=rng, cache=cache)
    labels = np.asarray(labels)
    loss = cross_entropy(logits, labels)

    B = logits.shape[0]
    mask = cache["enc"]["mask"]
    counts = mask.sum(axis=1)
    grads = {}

    def f64(name):
        return np.asarray(params[name], dtype=np.float64)

    probs = softmax(logits)
    dlogits = probs.copy()
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B

    grads["W_c"] = dlogits.T @ cache["pooled"]
    grads["b_c"] = dlogits.sum(axis=0)
    dpooled = dlogits @ f64("W_c")
    dx = dpooled[:, None, :] * (mask[:, :, None] / counts[:, None, None])

    scale = cache["enc"]["scale"]
    for i in reversed(range(config.num_layers)):
        pre = f"layers.{i}."
        lc = cache["enc"]["layers"][i]

        dr2, dg2, db2 = _layer_norm_backward(dx, lc["ln2"])
        grads[pre + "ln2_gamma"], grads[pre + "ln2_beta"] = dg2, db2
        dy1 = dr2.copy()
        df2 = dr2 if lc["drop_f"] is None else dr2 * lc["drop_f"]
        flat_df2 = df2.reshape(-1, config.d_model)
        grads[pre + "W_2"] = flat_df2.T @ lc["relu"].reshape(-1, config.ffn_dim)
        grads[pre + "b_2"] = flat_df2.sum(axis=0)
        drelu = df2 @ f64(pre + "W_2")
        df1 = drelu * (lc["f1"] > 0.0)
        flat_df1 = df1.reshape(-1, config.ffn_dim)
        grads[pre + "W_1"] = flat_df1.T @ lc["y1"].reshape(-1, config.d_model)
        grads[pre + "b_1"] = flat_df1.sum(axis=0)
        dy1 += df1 @ f64(pre + "W_1")

        dr1, dg1, db1 = _layer_norm_backward(dy1, lc["ln1"])
        grads[pre + "ln1_gamma"], grads[pre + "ln1_beta"] = dg1, db1
        dx = dr1.copy()
        dout = dr1 if lc["drop_a"] is None else dr1 * lc["drop_a"]
        flat_dout = dout.reshape(-1, config.d_model)
        grads[pre + "W_O"] = flat_dout.T @ lc["attn"].reshape(-1, config.d_model)
        grads[pre + "b_O"] = flat_dout.sum(axis=0)
        dattn = _split_heads(dout @ f64(pre + "W_O"), config.num_heads)

        dprobs = dattn @ lc["vh"].swapaxes(-1, -2)
        dvh = lc["probs"].swapaxes(-1, -2) @ dattn
        p_ = lc["probs"]
        dscores = p_ * (dprobs - (dprobs * p_).sum(axis=-1, keepdims=True))
        dqh = dscores @ lc["kh"] * scale
        dkh = dscores.swapaxes(-1, -2) @ lc["qh"] * scale
        x_in_flat = lc["x_in"].reshape(-1, config.d_model)
        for name, dh in (("Q", dqh), ("K", dkh), ("V", dvh)):
            d = _merge_heads(dh)
            flat = d.reshape(-1, config.d_model)
            grads[pre + f"W_{name}"] = flat.T @ x_in_flat
            grads[pre + f"b_{name}"] = flat.sum(axis=0)
            dx += d @ f64(pre + f"W_{name}")

    if cache["drop_in"] is not None:
        dx = dx * cache["drop_in"]
    flat_dz = dx.reshape(-1, config.d_model)
    grads["W_p"] = flat_dz.T @ cache["x"].reshape(-1, config.input_dim)
    grads["b_p"] = flat_dz.sum(axis=0)

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ModelError(f"non-finite gradient for {name}")
    return loss, grads, logits


def backward(batch, labels, params, config: ModelConfig) -> dict:
    """Gradients of the batch-mean cross-entropy loss (dropout disabled)."""
    return loss_and_gradients(batch, labels, params, config)[1]


def attention_weights(batch, params, config: ModelConfig) -> np.ndarray:
    """Post-softmax attention, shape layers x B x heads x T_max x T_max."""
    cache = {}
    forward(batch, params, config, training=False, cache=cache)
    return np.stack([lc["probs"] for lc in cache["enc"]["layers"]])
