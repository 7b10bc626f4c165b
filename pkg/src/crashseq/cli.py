"""Command-line pipeline: synth, flow, features, train, eval, attention,
vlm-compare, report.

Settings resolve as defaults <- TOML config file <- flags. Exit codes:
0 success, 1 usage/config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import dataio, evaluation, featx, optflow, synth, train
from .dataio import DataError
from .evaluation import EvalError, VLMParseError, VLMTransportError
from .featx import FeatureError, ModalitySpec, PreprocConfig
from .model import ModelConfig, ModelError
from .optflow import FlowError, FlowParams
from .synth import SynthConfig, SynthError
from .train import CheckpointError, TrainConfig, TrainError

log = logging.getLogger("crashseq")

MODALITY_CHOICES = featx.MODALITIES
THREADS_ENV = "CRASHSEQ_THREADS"


class ConfigError(ValueError):
    pass


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    preproc: PreprocConfig
    modality: ModalitySpec
    model: ModelConfig
    train: TrainConfig
    synth: SynthConfig
    explicit: set = dc_field(default_factory=set)


_TYPE_NAMES = {
    "int": (int,),
    "float": (int, float),
    "bool": (bool,),
    "str": (str,),
    "tuple": (list, tuple),
}
# keys accepted in [modality] that live on the nested FlowParams
_FLOW_KEYS = ("alpha", "iterations", "levels")


def _check_type(section: str, key: str, value, type_name: str):
    allowed = _TYPE_NAMES.get(type_name, ())
    if type_name != "bool" and isinstance(value, bool):
        raise ConfigError(f"type mismatch for `{section}.{key}`: expected {type_name}")
    if allowed and not isinstance(value, allowed):
        raise ConfigError(
            f"type mismatch for `{section}.{key}`: expected {type_name}, "
            f"got {type(value).__name__}")
    if type_name == "tuple":
        return tuple(value)
    if type_name == "float":
        return float(value)
    return value


def _merge_section(cls, section: str, file_vals: dict, overrides: dict,
                   explicit: set, extra_keys=()):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    merged = {}
    extras = {}
    for src in (file_vals, overrides):
        for key, value in src.items():
            if key in extra_keys:
                extras[key] = value
                explicit.add(f"{section}.{key}")
                continue
            if key not in fields:
                raise ConfigError(f"unknown key `{section}.{key}`")
            merged[key] = _check_type(section, key, value, str(fields[key].type))
            explicit.add(f"{section}.{key}")
    return merged, extras


def parse_config(path, overrides=None) -> RunConfig:
    """Merge defaults, TOML file, and flag overrides; reject unknown keys."""
    overrides = overrides or {}
    data = {}
    if path is not None:
        with open(path, "rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as err:
                raise ConfigError(f"{path}: {err}") from err
    known_sections = {"preproc", "modality", "model", "train", "synth"}
    for name in list(data) + list(overrides):
        if name not in known_sections:
            raise ConfigError(f"unknown key `{name}`")

    explicit: set = set()

    def section(name):
        return data.get(name, {}), overrides.get(name, {})

    pre_vals, _ = _merge_section(PreprocConfig, "preproc", *section("preproc"), explicit)
    mod_vals, flow_vals = _merge_section(ModalitySpec, "modality", *section("modality"),
                                         explicit, extra_keys=_FLOW_KEYS)
    model_vals, _ = _merge_section(ModelConfig, "model", *section("model"), explicit)
    train_vals, _ = _merge_section(TrainConfig, "train", *section("train"), explicit)
    synth_vals, _ = _merge_section(SynthConfig, "synth", *section("synth"), explicit)

    try:
        flow_params = FlowParams(**{
            k: _check_type("modality", k, v, "int" if k != "alpha" else "float")
            for k, v in flow_vals.items()})
        cfg = RunConfig(
            preproc=PreprocConfig(**pre_vals),
            modality=ModalitySpec(flow_params=flow_params,
                                  **{k: v for k, v in mod_vals.items()
                                     if k != "flow_params"}),
            model=ModelConfig(**model_vals),
            train=TrainConfig(**train_vals),
            synth=SynthConfig(**synth_vals),
            explicit=explicit,
        )
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    return cfg


def _echo_config(cfg: RunConfig) -> None:
    resolved = {name: dataclasses.asdict(getattr(cfg, name))
                for name in ("preproc", "modality", "model", "train", "synth")}
    log.info("resolved config: %s", json.dumps(resolved, default=list))


def _collect_overrides(args, mapping) -> dict:
    """mapping: {flag_attr: (section, key)}; drops unset flags."""
    out: dict = {}
    for attr, (section, key) in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            out.setdefault(section, {})[key] = value
    return out


def _resolve_threads(args) -> int:
    if getattr(args, "threads", None) is not None:
        n = args.threads
    elif os.environ.get(THREADS_ENV):
        try:
            n = int(os.environ[THREADS_ENV])
        except ValueError as err:
            raise UsageError(f"bad {THREADS_ENV} value: {os.environ[THREADS_ENV]!r}") from err
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise UsageError(f"--threads must be >= 1, got {n}")
    return n


def _parallel_map(fn, items, threads: int):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with threadpool_limits(limits=1):
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))


def _split_entries(entries, split: str):
    if split == "all":
        return entries
    picked = [e for e in entries if e.split == split]
    if not picked:
        raise DataError(f"no manifest entries with split {split!r}")
    return picked


_STREAMS_FOR = {
    "rgb": ("rgb",),
    "flow": ("flow",),
    "overlay": ("overlay",),
    "rgb_concat_flow": ("rgb", "flow"),
}


# ---------------------------------------------------------------- subcommands

def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = synth.generate_dataset(cfg.synth, out)
    log.info("wrote %s", manifest)
    print(manifest)
    return 0


def cmd_flow(args, cfg: RunConfig) -> int:
    frames = dataio.read_frame_sequence(args.frames_dir)
    params = cfg.modality.flow_params
    fields = optflow.flow_sequence(frames, params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.render:
        max_mag = max(max(float(f.magnitude().max()) for f in fields), 1e-6)
        for i, f in enumerate(fields):
            dataio.write_png(optflow.flow_to_color(f, max_mag), out / f"flow_{i:05d}.png")
    else:
        for i, f in enumerate(fields):
            np.savez(out / f"flow_{i:05d}.npz", u=f.u, v=f.v)
    log.info("wrote %d flow fields to %s", len(fields), out)
    return 0


def cmd_features(args, cfg: RunConfig) -> int:
    entries = dataio.load_manifest(args.manifest)
    streams = _STREAMS_FOR[args.modality]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    src_dir = Path(args.features_dir) if args.features_dir else None

    def one(entry):
        missing = []
        for stream in streams:
            target = out / f"{entry.clip_id}.{stream}.avfx"
            if target.exists():
                continue
            if src_dir is not None:
                src = src_dir / f"{entry.clip_id}.{stream}.avfx"
                if src.exists():
                    dataio.write_feature_file(
                        dataio.read_feature_file(src, clip_id=entry.clip_id), target)
                    continue
            missing.append(stream)
        if missing:
            frames = dataio.read_frame_sequence(entry.frames_path)
            sampled = featx.sample_frames(frames, cfg.preproc.frame_stride)
            computed = featx.clip_streams(sampled, cfg.modality, cfg.preproc,
                                          args.seed, entry.clip_id, tuple(missing))
            for stream, seq in computed.items():
                dataio.write_feature_file(seq, out / f"{entry.clip_id}.{stream}.avfx")
        return entry.clip_id

    threads = _resolve_threads(args)
    _parallel_map(one, entries, threads)
    log.info("features for %d clips (%s) in %s", len(entries), ",".join(streams), out)
    return 0


def _assemble_set(entries, spec, preproc, features_dir, fseed, threads):
    def one(entry):
        seq = featx.assemble_modality(entry, spec, preproc,
                                      features_dir=features_dir, seed=fseed)
        return seq, entry.label

    pairs = _parallel_map(one, entries, threads)
    dims = {seq.dim for seq, _ in pairs}
    if len(dims) > 1:
        raise FeatureError(f"feature-dim mismatch across clips: {sorted(dims)}")
    return pairs


def _carve_validation(entries, seed: int, frac: float = 0.15):
    """Stratified holdout from the train split for checkpoint selection.

    The test split stays untouched so reported test metrics are not used for
    model selection. Classes with fewer than 4 clips stay entirely in train.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7A1]))
    by_label: dict[int, list] = {}
    for e in entries:
        by_label.setdefault(e.label, []).append(e)
    train_part, val_part = [], []
    for label in sorted(by_label):
        group = by_label[label]
        if len(group) < 4:
            train_part.extend(group)
            continue
        n_val = max(1, int(round(frac * len(group))))
        order = rng.permutation(len(group))
        val_part.extend(group[i] for i in order[:n_val])
        train_part.extend(group[i] for i in order[n_val:])
    return train_part, val_part


def cmd_train(args, cfg: RunConfig) -> int:
    entries = dataio.load_manifest(args.manifest)
    kind = args.modality or cfg.modality.kind
    spec = dataclasses.replace(cfg.modality, kind=kind)
    threads = _resolve_threads(args)
    train_entries, val_entries = _carve_validation(
        _split_entries(entries, "train"), cfg.train.seed)
    train_set = _assemble_set(train_entries, spec, cfg.preproc, args.features_dir,
                              args.feature_seed, threads)
    val_set = _assemble_set(val_entries, spec, cfg.preproc, args.features_dir,
                            args.feature_seed, threads) if val_entries else []

    input_dim = train_set[0][0].dim
    if "model.input_dim" in cfg.explicit and cfg.model.input_dim != input_dim:
        raise FeatureError(
            f"feature dim {input_dim} does not match configured model.input_dim "
            f"{cfg.model.input_dim}")
    model_config = dataclasses.replace(cfg.model, input_dim=input_dim)
    log.info("training %s: %d train / %d val clips, D=%d", kind,
             len(train_set), len(val_set), input_dim)

    params, history = train.fit(train_set, val_set, model_config, cfg.train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metadata = {
        "modality": kind,
        "blend": spec.blend,
        "flow": dataclasses.asdict(spec.flow_params),
        "preproc": dataclasses.asdict(cfg.preproc),
        "feature_seed": args.feature_seed,
        "seed": cfg.train.seed,
        "epoch": history["best_epoch"],
        "train_loss": history["train_loss"],
        "val_accuracy": history["val_accuracy"],
        "scaler": history["scaler"],
    }
    ckpt = train.Checkpoint(config=model_config, params=params, metadata=metadata)
    train.save_checkpoint(ckpt, out / "best")
    dataio.atomic_write_text(out / "history.json", json.dumps(history, indent=2) + "\n")
    if history["val_accuracy"]:
        log.info("best val accuracy %.4f at epoch %d",
                 max(history["val_accuracy"]), history["best_epoch"])
    print(out / "best")
    return 0


def _checkpoint_path(base, kind: str, want_all: bool) -> Path:
    base = Path(base)
    if want_all:
        return base / kind / "best"
    if base.is_dir():
        return base / "best"
    return base


def _spec_from_metadata(meta: dict, cfg: RunConfig):
    kind = meta.get("modality", cfg.modality.kind)
    blend = meta.get("blend", cfg.modality.blend)
    flow_vals = meta.get("flow", dataclasses.asdict(cfg.modality.flow_params))
    preproc_vals = meta.get("preproc", dataclasses.asdict(cfg.preproc))
    preproc_vals = {k: tuple(v) if isinstance(v, list) else v
                    for k, v in preproc_vals.items()}
    spec = ModalitySpec(kind=kind, blend=blend, flow_params=FlowParams(**flow_vals))
    return spec, PreprocConfig(**preproc_vals), meta.get("feature_seed", 0)


def _scale_pairs(pairs, metadata):
    """Apply the checkpoint's stored feature standardization, if present."""
    scaler = metadata.get("scaler")
    if not scaler:
        return pairs
    seqs = train.apply_scaler([s for s, _ in pairs], scaler["mean"], scaler["std"])
    return list(zip(seqs, [label for _, label in pairs]))


def cmd_eval(args, cfg: RunConfig) -> int:
    entries = dataio.load_manifest(args.manifest)
    picked = _split_entries(entries, args.split)
    want_all = args.modality == "all"
    kinds = list(MODALITY_CHOICES) if want_all else [None]
    threads = _resolve_threads(args)
    rows = []
    for kind in kinds:
        path = _checkpoint_path(args.checkpoint, kind or "", want_all)
        ckpt = train.load_checkpoint(path)
        spec, preproc, fseed = _spec_from_metadata(ckpt.metadata, cfg)
        if kind is not None and spec.kind != kind:
            raise EvalError(f"checkpoint {path} was trained for {spec.kind!r}, "
                            f"expected {kind!r}")
        if not want_all and args.modality and spec.kind != args.modality:
            raise EvalError(f"checkpoint {path} was trained for {spec.kind!r}, "
                            f"--modality asked for {args.modality!r}")
        test_set = _assemble_set(picked, spec, preproc, args.features_dir,
                                 fseed, threads)
        test_set = _scale_pairs(test_set, ckpt.metadata)
        dump = args.dump_predictions if not want_all else (
            f"{args.dump_predictions}.{spec.kind}" if args.dump_predictions else None)
        rows.append(evaluation.evaluate(ckpt.params, ckpt.config, test_set,
                                        method=spec.kind,
                                        batch_size=cfg.train.batch_size,
                                        dump_path=dump))
    text, csv_text = evaluation.comparison_report(rows)
    print(text, end="")
    if args.out:
        dataio.atomic_write_text(args.out, csv_text)
    return 0


def cmd_attention(args, cfg: RunConfig) -> int:
    ckpt = train.load_checkpoint(_checkpoint_path(args.checkpoint, "", False))
    spec, preproc, fseed = _spec_from_metadata(ckpt.metadata, cfg)
    entries = dataio.load_manifest(args.manifest)
    if args.clip != "all":
        entries = [e for e in entries if e.clip_id == args.clip]
        if not entries:
            raise DataError(f"clip {args.clip!r} not found in manifest")
    threads = _resolve_threads(args)

    scaler = ckpt.metadata.get("scaler")

    def one(entry):
        seq = featx.assemble_modality(entry, spec, preproc,
                                      features_dir=args.features_dir, seed=fseed)
        if scaler:
            seq = train.apply_scaler([seq], scaler["mean"], scaler["std"])[0]
        return evaluation.attention_profile(ckpt.params, ckpt.config, seq,
                                            label=entry.label)

    profiles = _parallel_map(one, entries, threads)
    evaluation.write_attention_profiles(profiles, args.out)
    log.info("wrote %d attention profiles to %s", len(profiles), args.out)
    return 0


def _png_bytes(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="PNG")
    return buf.getvalue()


def cmd_vlm_compare(args, cfg: RunConfig) -> int:
    entries = dataio.load_manifest(args.manifest)
    picked = _split_entries(entries, args.split)

    def frames_for(entry):
        frames = dataio.read_frame_sequence(entry.frames_path)
        sampled = featx.sample_frames(frames, cfg.preproc.frame_stride)
        return entry.clip_id, [_png_bytes(f) for f in sampled]

    clip_frames = [frames_for(e) for e in picked]
    preds = evaluation.vlm_predict_clips(args.endpoint, args.model, clip_frames,
                                         concurrency=args.concurrency,
                                         timeout=args.timeout)
    labels = [e.label for e in picked]
    ordered = [preds[e.clip_id] for e in picked]
    report = evaluation.metrics(evaluation.confusion(ordered, labels),
                                method=args.model)
    text, csv_text = evaluation.comparison_report([report])
    print(text, end="")
    if args.out:
        dataio.atomic_write_text(args.out, csv_text)
    return 0


def cmd_report(args, cfg: RunConfig) -> int:
    rows = []
    for path in args.inputs:
        rows.extend(evaluation.read_report_csv(path))
    text, csv_text = evaluation.comparison_report(rows)
    print(text if args.format == "text" else csv_text, end="")
    return 0


# ------------------------------------------------------------------- parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="crashseq", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--threads", type=int, help=f"worker threads (env {THREADS_ENV})")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, dest="per_class")
    p.add_argument("--frames", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("flow", help="compute optical flow for one frame directory")
    common(p)
    p.add_argument("--frames-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--levels", type=int)
    p.add_argument("--render", action="store_true",
                   help="write flow-color PNGs instead of raw fields")

    p = sub.add_parser("features", help="extract per-clip feature streams to AVFX files")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--modality", required=True, choices=MODALITY_CHOICES)
    p.add_argument("--features-dir", help="existing stream files to reuse")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="feature extractor seed")

    p = sub.add_parser("train", help="train the sequence classifier")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--modality", choices=MODALITY_CHOICES)
    p.add_argument("--out", required=True)
    p.add_argument("--features-dir")
    p.add_argument("--feature-seed", type=int, default=0)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--d-model", type=int, dest="d_model")
    p.add_argument("--num-layers", type=int, dest="num_layers")
    p.add_argument("--num-heads", type=int, dest="num_heads")
    p.add_argument("--dropout", type=float)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test",
                   choices=("train", "test", "unassigned", "all"))
    p.add_argument("--modality", choices=MODALITY_CHOICES + ("all",))
    p.add_argument("--features-dir")
    p.add_argument("--dump-predictions", help="write per-clip predictions JSONL here")
    p.add_argument("--out", help="write the metrics CSV here")

    p = sub.add_parser("attention", help="export per-frame attention profiles")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--clip", required=True, help="clip id, or 'all'")
    p.add_argument("--features-dir")
    p.add_argument("--out", required=True)

    p = sub.add_parser("vlm-compare", help="query a yes/no VLM endpoint per clip")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--endpoint", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="test",
                   choices=("train", "test", "unassigned", "all"))
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--out", help="write the metrics CSV here")

    p = sub.add_parser("report", help="merge metrics CSVs into one table")
    common(p)
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--format", default="text", choices=("text", "csv"))
    return parser


_OVERRIDE_MAPS = {
    "synth": {"per_class": ("synth", "num_clips_per_class"),
              "frames": ("synth", "frames_per_clip"),
              "seed": ("synth", "seed")},
    "flow": {"alpha": ("modality", "alpha"),
             "iters": ("modality", "iterations"),
             "levels": ("modality", "levels")},
    "train": {"seed": ("train", "seed"), "epochs": ("train", "epochs"),
              "lr": ("train", "learning_rate"), "batch": ("train", "batch_size"),
              "d_model": ("model", "d_model"), "num_layers": ("model", "num_layers"),
              "num_heads": ("model", "num_heads"),
              "dropout": ("model", "dropout_rate")},
}

_HANDLERS = {
    "synth": cmd_synth,
    "flow": cmd_flow,
    "features": cmd_features,
    "train": cmd_train,
    "eval": cmd_eval,
    "attention": cmd_attention,
    "vlm-compare": cmd_vlm_compare,
    "report": cmd_report,
}

_RUNTIME_ERRORS = (DataError, FlowError, FeatureError, ModelError, TrainError,
                   CheckpointError, EvalError, SynthError, VLMTransportError,
                   VLMParseError, OSError)


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags; our contract is 1 for usage errors
        return 0 if exc.code in (0, None) else 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        overrides = _collect_overrides(args, _OVERRIDE_MAPS.get(args.command, {}))
        cfg = parse_config(args.config, overrides)
    except (ConfigError, UsageError) as err:
        print(f"crashseq: error: {err}", file=sys.stderr)
        return 1
    _echo_config(cfg)
    try:
        threads = _resolve_threads(args)
        with threadpool_limits(limits=threads):
            return _HANDLERS[args.command](args, cfg)
    except UsageError as err:
        print(f"crashseq: error: {err}", file=sys.stderr)
        return 1
    except _RUNTIME_ERRORS as err:
        print(f"crashseq: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
