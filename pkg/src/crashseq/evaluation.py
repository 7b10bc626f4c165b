"""Classification metrics, per-modality reports, attention profiles, and the
yes/no vision-language-model comparison client."""

from __future__ import annotations

import base64
import csv
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import requests

from . import train
from .dataio import FeatureSequence, atomic_write_text

VLM_PROMPT = "Is there any traffic accident/crash in the video. Write Yes or No"
CSV_HEADER = ("method", "accuracy", "precision", "recall", "f1")


class EvalError(ValueError):
    pass


class VLMTransportError(RuntimeError):
    """Endpoint unreachable, timed out, or returned a non-success status."""


class VLMParseError(ValueError):
    """Response text did not start with yes or no."""


@dataclass
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class MetricsReport:
    method: str
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: ConfusionMatrix
    degenerate: tuple = ()


@dataclass
class AttentionProfile:
    clip_id: str
    scores: np.ndarray
    prediction: int
    label: object = None


def confusion(preds, labels) -> ConfusionMatrix:
    """Counts with label 1 as the positive class."""
    preds = list(preds)
    labels = list(labels)
    if len(preds) != len(labels):
        raise EvalError(f"length mismatch: {len(preds)} preds vs {len(labels)} labels")
    cm = ConfusionMatrix()
    for p, l in zip(preds, labels):
        if p not in (0, 1) or l not in (0, 1):
            raise EvalError(f"predictions and labels must be 0/1, got ({p!r}, {l!r})")
        if l == 1:
            if p == 1:
                cm.tp += 1
            else:
                cm.fn += 1
        else:
            if p == 1:
                cm.fp += 1
            else:
                cm.tn += 1
    return cm


def metrics(cm: ConfusionMatrix, method: str = "") -> MetricsReport:
    """Accuracy, precision, recall, F1; zero-denominator metrics are 0 and flagged."""
    if cm.total == 0:
        raise EvalError("metrics: empty confusion matrix")
    degenerate = []

    def ratio(num, den, name):
        if den == 0:
            degenerate.append(name)
            return 0.0
        return num / den

    accuracy = (cm.tp + cm.tn) / cm.total
    precision = ratio(cm.tp, cm.tp + cm.fp, "precision")
    recall = ratio(cm.tp, cm.tp + cm.fn, "recall")
    f1 = ratio(2 * precision * recall, precision + recall, "f1")
    return MetricsReport(method=method, accuracy=accuracy, precision=precision,
                         recall=recall, f1=f1, confusion=cm,
                         degenerate=tuple(degenerate))


def evaluate(params, config, test_set, method: str = "", batch_size: int = 16,
             dump_path=None) -> MetricsReport:
    """Metrics over (FeatureSequence, label) pairs; argmax decisions, ties -> 0.

    With dump_path, writes a JSONL per-clip prediction dump for inspecting
    misclassified clips.
    """
    test_set = list(test_set)
    if not test_set:
        raise EvalError("evaluate: empty test set")
    seqs = [s for s, _ in test_set]
    labels = [int(l) for _, l in test_set]
    preds = train.predict(params, config, seqs, batch_size).tolist()
    if dump_path is not None:
        lines = [json.dumps({"clip_id": s.clip_id, "label": l, "prediction": p})
                 for s, l, p in zip(seqs, labels, preds)]
        atomic_write_text(dump_path, "\n".join(lines) + "\n")
    return metrics(confusion(preds, labels), method=method)


def attention_profile(params, config, clip_features: FeatureSequence,
                      label=None) -> AttentionProfile:
    """Per-frame attention received: final layer, mean over heads and queries,
    renormalized to sum 1."""
    batch = train.pad_batch([clip_features])
    from . import model  # local import keeps module load cheap

    weights = model.attention_weights(batch, params, config)
    final = weights[-1, 0]  # heads x T x T
    heads, T, _ = final.shape
    scores = final.sum(axis=(0, 1)) / (heads * T)
    total = scores.sum()
    if total > 0:
        scores = scores / total
    pred = int(train.predict(params, config, [clip_features])[0])
    return AttentionProfile(clip_id=clip_features.clip_id, scores=scores,
                            prediction=pred, label=label)


def write_attention_profiles(profiles, path) -> None:
    lines = []
    for p in profiles:
        lines.append(json.dumps({
            "clip_id": p.clip_id,
            "label": p.label,
            "prediction": p.prediction,
            "scores": [float(s) for s in p.scores],
        }))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _parse_vlm_text(text: str) -> int:
    token = ""
    for ch in text:
        if ch.isalpha():
            token += ch
        elif token:
            break
    folded = token.casefold()
    if folded == "yes":
        return 1
    if folded == "no":
        return 0
    raise VLMParseError(f"expected a yes/no answer, got {text!r}")


def vlm_query(endpoint: str, frames, model_name: str, timeout: float = 30.0,
              retries: int = 2, backoff: float = 0.5) -> int:
    """Ask the endpoint whether the clip shows an accident; 1 = yes, 0 = no.

    frames are encoded image bytes (PNG/JPEG). Transport failures are retried
    with exponential backoff (at most `retries` retries); parse failures are
    never retried or coerced.
    """
    frames = list(frames)
    if not frames:
        raise EvalError("vlm_query: need at least one frame")
    body = {
        "model": model_name,
        "prompt": VLM_PROMPT,
        "images": [base64.b64encode(f).decode("ascii") for f in frames],
    }
    last_err = None
    for attempt in range(retries + 1):
        try:
            resp = requests.post(endpoint, json=body, timeout=timeout)
        except (requests.exceptions.ConnectionError, requests.exceptions.Timeout) as err:
            last_err = err
            if attempt < retries:
                time.sleep(backoff * (2 ** attempt))
            continue
        if resp.status_code != 200:
            raise VLMTransportError(f"endpoint returned HTTP {resp.status_code}")
        try:
            text = resp.json()["text"]
        except (ValueError, KeyError) as err:
            raise VLMParseError(f"malformed response body: {err}") from err
        return _parse_vlm_text(text)
    raise VLMTransportError(f"endpoint unreachable after {retries + 1} attempts: {last_err}")


def vlm_predict_clips(endpoint: str, model_name: str, clips, concurrency: int = 4,
                      timeout: float = 30.0) -> dict:
    """clips: iterable of (clip_id, [frame bytes]); returns clip_id -> {0,1}."""
    clips = list(clips)
    results = {}
    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        futures = {clip_id: pool.submit(vlm_query, endpoint, frames, model_name, timeout)
                   for clip_id, frames in clips}
        for clip_id, fut in futures.items():
            results[clip_id] = fut.result()
    return results


def _format_value(x: float) -> str:
    return f"{x:.3f}"


def comparison_report(rows) -> tuple:
    """Render MetricsReport rows as (text table, CSV string), 3 decimals."""
    rows = list(rows)
    if not rows:
        raise EvalError("comparison_report: no rows")
    headers = ("Method", "Accuracy", "Precision", "Recall", "F1")
    cells = [[r.method, _format_value(r.accuracy), _format_value(r.precision),
              _format_value(r.recall), _format_value(r.f1)] for r in rows]
    widths = [max(len(h), *(len(c[i]) for c in cells)) for i, h in enumerate(headers)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    text_lines = [fmt.format(*headers)]
    text_lines.append("  ".join("-" * w for w in widths))
    text_lines.extend(fmt.format(*c) for c in cells)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    writer.writerows(cells)
    return "\n".join(text_lines) + "\n", buf.getvalue()


def read_report_csv(path) -> list:
    """Parse a comparison CSV back into MetricsReport rows (confusion omitted)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise EvalError(f"{path}: unexpected CSV header {reader.fieldnames}")
        rows = []
        for rec in reader:
            rows.append(MetricsReport(
                method=rec["method"], accuracy=float(rec["accuracy"]),
                precision=float(rec["precision"]), recall=float(rec["recall"]),
                f1=float(rec["f1"]), confusion=ConfusionMatrix()))
    return rows
