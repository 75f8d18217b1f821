"""Experiment configuration, validation and orchestration behind the command line.

A run is described by an :class:`ExperimentConfig`. Every command resolves defaults
(by preset), validates the whole config before any compute, then pretrains (with a
content-addressed checkpoint cache), extracts features and trains downstream heads.
Reports are deterministic JSON/CSV documents that embed the resolved config and a
hash of the package source.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .data import Clip, SyntheticSpec, by_split, subset_fraction
from .errors import ConfigError, MissingModality, SplitError
from .metrics import RunReport
from .models import PRESETS, ModelConfig, load_audio_encoder
from .signal import Waveform, mix_at_snr, synth_babble
from .traindown import (
    MODES,
    DownstreamData,
    DownstreamSchedule,
    PretrainSchedule,
    derive_seed,
    evaluate_odd,
    extract_features,
    pretrain,
    random_init_encoder,
    selection_metric,
    standardize,
    train_downstream,
)

log = logging.getLogger(__name__)

WORKDIR_ENV = "AVSSL_WORKDIR"
PRETEXTS = ("L1", "Odd", "L1+Odd", "none")
# "none" is a frozen random-init encoder; "scratch" trains that encoder end-to-end
METHODS = PRETEXTS + ("scratch", "mfcc", "logmel")
VIDEO_METHODS = ("L1", "L1+Odd")
DEFAULT_ALPHAS = (0.17, 0.33, 0.50, 0.67, 0.83)
DEFAULT_SNRS = (-5.0, 0.0, 5.0, 10.0, 15.0, 20.0)
DEFAULT_FRACTIONS = (0.2, 0.4, 0.6, 0.8, 1.0)

# Desk preset: sized for a single CPU core. The canonical preset keeps the full-scale
# schedule values and expects real corpora through manifests.
SCHEDULE_DEFAULTS = {
    "desk": {
        "pretrain": dict(epochs=20, lr0=0.002, decay=0.98, decay_every=10, batch_size=16,
                         group_size=4, clip_norm=1.0),
        "downstream": dict(epochs=60, lr0=3e-3, decay=0.1, decay_every=40, batch_size=16),
    },
    "canonical": {
        "pretrain": dataclasses.asdict(PretrainSchedule()),
        "downstream": dataclasses.asdict(DownstreamSchedule()),
    },
}
DATA_DEFAULTS = {
    "pretrain": {"synthetic": {"n_speakers": 24, "clips_per_speaker": 30,
                               "split_ratios": [0.8, 0.1, 0.1], "seed": 100}},
    "downstream": {"synthetic": {"n_speakers": 12, "clips_per_speaker": 24,
                                 "split_ratios": [0.5, 0.25, 0.25], "with_video": False,
                                 "seed": 200}},
}


@dataclass
class ExperimentConfig:
    pretext: str = "L1+Odd"
    alpha: float = 0.67
    preset: str = "desk"
    pretrain_data: dict | None = None
    downstream_data: dict | None = None
    pretrain_fraction: float = 1.0
    label_fraction: float = 1.0
    task: str = "classify"
    mode: str = "frozen"
    baselines: list = field(default_factory=list)
    n_runs: int = 10
    pretrain_schedule: dict | None = None
    downstream_schedule: dict | None = None
    model: dict = field(default_factory=dict)
    standardize: bool = True
    alpha_grid: list = field(default_factory=lambda: list(DEFAULT_ALPHAS))
    snr_list: list = field(default_factory=lambda: list(DEFAULT_SNRS))
    fraction_list: list = field(default_factory=lambda: list(DEFAULT_FRACTIONS))
    noise_methods: list = field(default_factory=lambda: ["L1", "Odd", "L1+Odd", "mfcc"])
    size_methods: list = field(default_factory=lambda: ["L1", "Odd", "L1+Odd"])
    babble_sources: int = 6
    seed: int = 0

    @classmethod
    def fields(cls) -> set:
        return {f.name for f in dataclasses.fields(cls)}

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))


# -- loading and validation --------------------------------------------------------

def load_config_file(path) -> dict:
    path = Path(path)
    try:
        body = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError("config", f"file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError("config", f"{path} is not valid JSON: {e}") from None
    if not isinstance(body, dict):
        raise ConfigError("config", "top level must be an object")
    return body


def build_config(file_values: dict | None = None, overrides: dict | None = None
                 ) -> ExperimentConfig:
    """Defaults, then file values, then command-line overrides; then preset defaults
    fill whatever is still unset."""
    merged = {}
    for source in (file_values or {}, overrides or {}):
        for k, v in source.items():
            if k not in ExperimentConfig.fields():
                raise ConfigError(k, "unknown config field")
            if v is not None:
                merged[k] = v
    cfg = ExperimentConfig(**merged)
    return resolve(cfg)


def resolve(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.preset not in SCHEDULE_DEFAULTS:
        raise ConfigError("preset", f"unknown preset {cfg.preset!r}; expected one of "
                                    f"{sorted(SCHEDULE_DEFAULTS)}")
    sched = SCHEDULE_DEFAULTS[cfg.preset]
    return dataclasses.replace(
        cfg,
        pretrain_schedule={**sched["pretrain"], **(cfg.pretrain_schedule or {})},
        downstream_schedule={**sched["downstream"], **(cfg.downstream_schedule or {})},
        pretrain_data=cfg.pretrain_data or json.loads(json.dumps(DATA_DEFAULTS["pretrain"])),
        downstream_data=(cfg.downstream_data
                         or json.loads(json.dumps(DATA_DEFAULTS["downstream"]))),
    )


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _check_fraction(name, value):
    if not _is_number(value) or not 0 < value <= 1:
        raise ConfigError(name, f"must be a number in (0, 1], got {value!r}")


def _check_methods(name, methods):
    if not isinstance(methods, list):
        raise ConfigError(name, "must be a list")
    for m in methods:
        if m not in METHODS:
            raise ConfigError(name, f"unknown method {m!r}; expected one of {list(METHODS)}")


def _check_schedule(name, values: dict, cls):
    names = {f.name for f in dataclasses.fields(cls)}
    for k, v in values.items():
        if k not in names:
            raise ConfigError(f"{name}.{k}", "unknown schedule field")
        if k == "clip_norm" and v is None:
            continue
        if not _is_number(v) or v <= 0:
            raise ConfigError(f"{name}.{k}", f"must be a positive number, got {v!r}")
    for k in ("epochs", "batch_size", "decay_every", "group_size"):
        if k in values and int(values[k]) != values[k]:
            raise ConfigError(f"{name}.{k}", "must be an integer")
    if values.get("group_size", 2) < 2:
        raise ConfigError(f"{name}.group_size", "must be at least 2")


def _check_data_ref(name, ref):
    if not isinstance(ref, dict) or len(ref) != 1 or next(iter(ref)) not in ("synthetic",
                                                                             "manifest"):
        raise ConfigError(name, 'must be {"synthetic": {...}} or {"manifest": "path"}')
    kind, value = next(iter(ref.items()))
    if kind == "manifest":
        if not isinstance(value, str) or not Path(value).is_file():
            raise ConfigError(f"{name}.manifest", f"manifest file {value!r} not found")
        return
    if not isinstance(value, dict):
        raise ConfigError(f"{name}.synthetic", "must be an object of generator settings")
    known = {f.name for f in dataclasses.fields(SyntheticSpec)}
    for k in value:
        if k not in known:
            raise ConfigError(f"{name}.synthetic.{k}", "unknown generator setting")
    try:
        _synthetic_spec(value)
    except (ValueError, TypeError, SplitError) as e:
        raise ConfigError(f"{name}.synthetic", str(e)) from None


def _synthetic_spec(values: dict) -> SyntheticSpec:
    values = dict(values)
    if "split_ratios" in values:
        values["split_ratios"] = tuple(values["split_ratios"])
    return SyntheticSpec(**values)


def _has_video(ref) -> bool:
    kind, value = next(iter(ref.items()))
    if kind == "synthetic":
        return bool(value.get("with_video", True))
    records = data_mod.read_manifest(value)
    return all(r.video_path for r in records if r.split == "train")


def _has_targets(ref, task) -> bool:
    kind, value = next(iter(ref.items()))
    if kind == "synthetic":
        return True
    records = data_mod.read_manifest(value)
    key = "label" if task == "classify" else "affect_track"
    return any(getattr(r, key) is not None for r in records if r.split == "train")


def methods_for(cfg: ExperimentConfig, command: str) -> list:
    if command == "ablate-alpha":
        return ["L1+Odd"]
    if command == "ablate-noise":
        return list(cfg.noise_methods)
    if command == "ablate-size":
        return list(cfg.size_methods)
    if command == "eval":
        main = main_method(cfg)
        return [main] + [b for b in cfg.baselines if b != main]
    return [cfg.pretext]


def main_method(cfg: ExperimentConfig) -> str:
    """Scratch mode trains a random-init encoder end-to-end whatever the pretext."""
    return "scratch" if cfg.mode == "scratch" else cfg.pretext


def validate(cfg: ExperimentConfig, command: str = "eval") -> ExperimentConfig:
    """Check every field against the module contracts; raises ConfigError (or
    MissingModality) before any compute happens."""
    if cfg.pretext not in PRETEXTS:
        raise ConfigError("pretext", f"must be one of {list(PRETEXTS)}, got {cfg.pretext!r}")
    if not _is_number(cfg.alpha) or not 0 <= cfg.alpha <= 1:
        raise ConfigError("alpha", f"must lie in [0, 1], got {cfg.alpha!r}")
    if cfg.preset not in PRESETS:
        raise ConfigError("preset", f"unknown preset {cfg.preset!r}")
    if cfg.task not in ("classify", "regress"):
        raise ConfigError("task", f"must be 'classify' or 'regress', got {cfg.task!r}")
    if cfg.mode not in MODES:
        raise ConfigError("mode", f"must be one of {list(MODES)}, got {cfg.mode!r}")
    if cfg.pretext == "none" and cfg.mode == "finetune":
        raise ConfigError("mode", "finetune needs a pretext; use mode 'scratch' instead")
    if not isinstance(cfg.n_runs, int) or isinstance(cfg.n_runs, bool) or cfg.n_runs < 1:
        raise ConfigError("n_runs", f"must be an integer >= 1, got {cfg.n_runs!r}")
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool) or cfg.seed < 0:
        raise ConfigError("seed", f"must be a non-negative integer, got {cfg.seed!r}")
    if not isinstance(cfg.standardize, bool):
        raise ConfigError("standardize", "must be true or false")
    _check_fraction("pretrain_fraction", cfg.pretrain_fraction)
    _check_fraction("label_fraction", cfg.label_fraction)
    _check_methods("baselines", cfg.baselines)
    _check_methods("noise_methods", cfg.noise_methods)
    _check_methods("size_methods", cfg.size_methods)
    if not isinstance(cfg.alpha_grid, list) or not cfg.alpha_grid:
        raise ConfigError("alpha_grid", "must be a non-empty list")
    for a in cfg.alpha_grid:
        if not _is_number(a) or not 0 <= a <= 1:
            raise ConfigError("alpha_grid", f"entries must lie in [0, 1], got {a!r}")
    if not isinstance(cfg.snr_list, list) or not cfg.snr_list:
        raise ConfigError("snr_list", "must be a non-empty list")
    for s in cfg.snr_list:
        if not _is_number(s):
            raise ConfigError("snr_list", f"entries must be finite numbers, got {s!r}")
    if not isinstance(cfg.fraction_list, list) or not cfg.fraction_list:
        raise ConfigError("fraction_list", "must be a non-empty list")
    for f in cfg.fraction_list:
        _check_fraction("fraction_list", f)
    if not isinstance(cfg.babble_sources, int) or cfg.babble_sources < 1:
        raise ConfigError("babble_sources", "must be a positive integer")
    if not isinstance(cfg.model, dict):
        raise ConfigError("model", "must be an object of model-size overrides")
    try:
        model_config(cfg)
    except TypeError as e:
        raise ConfigError("model", str(e)) from None
    _check_schedule("pretrain_schedule", cfg.pretrain_schedule, PretrainSchedule)
    _check_schedule("downstream_schedule", cfg.downstream_schedule, DownstreamSchedule)
    _check_data_ref("pretrain_data", cfg.pretrain_data)
    _check_data_ref("downstream_data", cfg.downstream_data)

    methods = methods_for(cfg, command)
    if any(m in VIDEO_METHODS for m in methods) and command not in ("synth-data",):
        if not _has_video(cfg.pretrain_data):
            needing = sorted(set(methods) & set(VIDEO_METHODS))
            raise MissingModality(f"pretrain_data has no video, required by {needing}")
    if command in ("eval", "ablate-alpha", "ablate-noise", "ablate-size"):
        if not _has_targets(cfg.downstream_data, cfg.task):
            raise ConfigError("downstream_data", f"no {cfg.task} targets in the train split")
    return cfg


def model_config(cfg: ExperimentConfig) -> ModelConfig:
    base = PRESETS[cfg.preset]()
    overrides = dict(cfg.model)
    if "id_channels" in overrides:
        overrides["id_channels"] = tuple(overrides["id_channels"])
    if "frame_hw" in overrides:
        overrides["frame_hw"] = tuple(overrides["frame_hw"])
    return dataclasses.replace(base, **overrides)


# -- workspace and caching --------------------------------------------------------

def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def content_key(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def code_hash() -> str:
    """SHA-256 over the package's Python sources, in path order."""
    root = Path(__file__).parent
    h = hashlib.sha256()
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def atomic_write(path, payload: str | bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(payload, str):
        payload = payload.encode()
    tmp.write_bytes(payload)
    tmp.replace(path)


class Workspace:
    """Work directory holding the checkpoint cache, feature stores and reports."""

    def __init__(self, root=None):
        self.root = Path(root or os.environ.get(WORKDIR_ENV) or "avssl-work")
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def rel(self, p) -> str:
        """Workdir-relative path string, so reports do not depend on where they ran."""
        try:
            return Path(p).resolve().relative_to(self.root.resolve()).as_posix()
        except ValueError:
            return Path(p).as_posix()


_CORPUS_CACHE: dict = {}


def load_clips(ref: dict, with_video: bool = True) -> list[Clip]:
    """Clips for a data reference; synthetic corpora are memoised per process."""
    key = canonical_json([ref, with_video])
    if key not in _CORPUS_CACHE:
        kind, value = next(iter(ref.items()))
        if kind == "synthetic":
            spec = _synthetic_spec(value)
            if not with_video and spec.with_video:
                spec = dataclasses.replace(spec, with_video=False)
            clips = data_mod.generate_synthetic(spec)
        else:
            clips = data_mod.load_corpus(value, load_video=with_video)
        _CORPUS_CACHE[key] = clips
    return _CORPUS_CACHE[key]


def pretrain_key(cfg: ExperimentConfig, method: str, alpha: float, fraction: float) -> dict:
    return {"method": method, "alpha": alpha if method == "L1+Odd" else None,
            "model": model_config(cfg).to_dict(), "data": cfg.pretrain_data,
            "fraction": fraction, "schedule": cfg.pretrain_schedule, "seed": cfg.seed}


def pretrain_subset(cfg: ExperimentConfig, fraction: float, need_video: bool) -> list[Clip]:
    clips = load_clips(cfg.pretrain_data, with_video=need_video)
    train = by_split(clips, "train")
    return subset_fraction(train, fraction, "pretrain_clips", seed=cfg.seed)


def ensure_checkpoint(cfg: ExperimentConfig, ws: Workspace, method: str,
                      alpha: float | None = None, fraction: float | None = None) -> dict:
    """Pretrain ``method`` unless an identical run is already cached; returns a summary
    with the checkpoint path and loss traces."""
    alpha = cfg.alpha if alpha is None else alpha
    fraction = cfg.pretrain_fraction if fraction is None else fraction
    key_body = pretrain_key(cfg, method, alpha, fraction)
    key = content_key(key_body)
    path = ws.path("checkpoints", f"{method.replace('+', '_')}-{key}.npz")
    summary_path = path.with_suffix(".json")
    if path.exists() and summary_path.exists():
        log.info("reusing cached checkpoint %s", path)
        return json.loads(summary_path.read_text())
    need_video = method in VIDEO_METHODS
    clips = pretrain_subset(cfg, fraction, need_video)
    schedule = PretrainSchedule(**cfg.pretrain_schedule)
    path.parent.mkdir(parents=True, exist_ok=True)
    result = pretrain(method, clips, alpha=alpha, schedule=schedule, seed=cfg.seed,
                      model_cfg=model_config(cfg), checkpoint_path=path, config_echo=key_body)
    summary = {"checkpoint": ws.rel(path), "method": method, "alpha": key_body["alpha"],
               "fraction": fraction, "n_clips": len(clips),
               "total_trace": result.total_trace, "video_trace": result.video_trace,
               "audio_trace": result.audio_trace}
    if method in ("Odd", "L1+Odd"):
        held_out = [c for c in load_clips(cfg.pretrain_data, with_video=False)
                    if c.record.split != "train"]
        if len(held_out) >= schedule.group_size:
            summary["odd_accuracy_heldout"] = evaluate_odd(
                result.model.audio_encoder, result.model.odd_scorer, held_out,
                schedule.group_size, seed=cfg.seed, repeats=5)
    atomic_write(summary_path, canonical_json(summary))
    return summary


# -- downstream ---------------------------------------------------------------------

def add_babble(clips, snr_db: float, m: int = 6, seed: int = 0) -> list[Clip]:
    """Noisy copies of ``clips``: each gets babble built from ``m`` other clips of its own
    split, mixed at ``snr_db``. The babble realisation depends only on ``seed`` and the
    clip position, so every SNR level uses the same noise at a different gain."""
    out = []
    for split in data_mod.SPLITS:
        members = [(i, c) for i, c in enumerate(clips) if c.record.split == split]
        for j, (i, c) in enumerate(members):
            pool = [o.audio for k, (_, o) in enumerate(members) if k != j]
            if not pool:
                raise MissingModality(f"split {split!r} has no other clips for babble")
            rng = np.random.default_rng([seed, 9, i])
            babble = synth_babble(pool, min(m, len(pool)), len(c.audio), seed=rng)
            noisy = mix_at_snr(c.audio, babble, snr_db).samples
            out.append((i, Clip(c.record, Waveform(noisy, c.audio.sample_rate), c.video)))
    return [c for _, c in sorted(out, key=lambda p: p[0])]


def _labelled(cfg: ExperimentConfig, clips):
    if cfg.label_fraction < 1.0:
        return subset_fraction(clips, cfg.label_fraction, "labels", seed=cfg.seed)
    return clips


def _n_classes(cfg, clips) -> int:
    if cfg.task != "classify":
        return 0
    labels = [c.record.label for c in clips if c.record.label is not None]
    return max(labels) + 1 if labels else 0


def method_inputs(cfg: ExperimentConfig, ws: Workspace, method: str, clips,
                  checkpoint: str | None = None):
    """Returns ``(inputs, encoder, mode)`` for downstream training of ``method``."""
    mcfg = model_config(cfg)
    if method == "mfcc" or method == "logmel":
        feats = extract_features(None, clips, kind=method)
        return (standardize(feats, clips) if cfg.standardize else feats), None, "frozen"
    if method == "scratch":
        return [c.logmel for c in clips], None, "scratch"
    if method == "none":
        encoder = random_init_encoder(mcfg, seed=cfg.seed)
    else:
        encoder, _ = load_audio_encoder(ws.path(checkpoint))
    if cfg.mode == "finetune" and method != "none":
        return [c.logmel for c in clips], encoder, "finetune"
    feats = extract_features(encoder, clips)
    return (standardize(feats, clips) if cfg.standardize else feats), None, "frozen"


def downstream_runs(cfg: ExperimentConfig, ws: Workspace, method: str, clips,
                    checkpoint: str | None = None) -> dict:
    """``n_runs`` downstream trainings with derived seeds; test and validation reports."""
    inputs, encoder, mode = method_inputs(cfg, ws, method, clips, checkpoint)
    labelled = _labelled(cfg, clips)
    dd = DownstreamData.from_clips(labelled, inputs, cfg.task, _n_classes(cfg, clips))
    schedule = DownstreamSchedule(**cfg.downstream_schedule)
    key = selection_metric(cfg.task)
    seeds = [derive_seed(cfg.seed, i) for i in range(cfg.n_runs)]
    test, val, epochs = [], [], []
    for s in seeds:
        res = train_downstream(cfg.task, dd, mode, schedule, seed=s, encoder=encoder,
                               model_cfg=model_config(cfg))
        test.append(res.test_metrics[key])
        val.append(res.val_metric)
        epochs.append(res.best_epoch)
    return {"method": method, "mode": mode, "checkpoint": checkpoint,
            "test": RunReport(key, test, seeds), "val": RunReport(key, val, seeds),
            "best_epochs": epochs, "n_train_labelled": len(dd.train.x)}


def _run_entry(run: dict) -> dict:
    return {"method": run["method"], "mode": run["mode"], "checkpoint": run["checkpoint"],
            "test": run["test"].to_dict(), "val": run["val"].to_dict(),
            "best_epochs": run["best_epochs"], "n_train_labelled": run["n_train_labelled"]}


def _checkpoint_for(cfg, ws, method, artifacts, alpha=None, fraction=None):
    if method not in ("L1", "Odd", "L1+Odd"):
        return None
    summary = ensure_checkpoint(cfg, ws, method, alpha=alpha, fraction=fraction)
    artifacts.setdefault("pretraining", {})[summary["checkpoint"]] = summary
    return summary["checkpoint"]


def _downstream_clips(cfg):
    return load_clips(cfg.downstream_data, with_video=False)


# -- commands -------------------------------------------------------------------------

def _report(command: str, cfg: ExperimentConfig, **body) -> dict:
    return {"command": command, "config": cfg.to_dict(), "code_hash": code_hash(), **body}


def cmd_pretrain(cfg: ExperimentConfig, ws: Workspace) -> dict:
    if cfg.pretext == "none":
        raise ConfigError("pretext", "pretrain needs a pretext task, got 'none'")
    summary = ensure_checkpoint(cfg, ws, cfg.pretext)
    return _report("pretrain", cfg, artifacts={"checkpoint": summary["checkpoint"]},
                   pretraining=summary)


def cmd_extract(cfg: ExperimentConfig, ws: Workspace) -> dict:
    artifacts = {}
    clips = _downstream_clips(cfg)
    method = cfg.pretext
    checkpoint = _checkpoint_for(cfg, ws, method, artifacts)
    key = content_key({"method": method, "checkpoint": checkpoint,
                       "data": cfg.downstream_data, "seed": cfg.seed,
                       "model": model_config(cfg).to_dict()})
    store = ws.path("features", f"{method.replace('+', '_')}-{key}")
    if method == "none":
        extract_features(random_init_encoder(model_config(cfg), seed=cfg.seed), clips, store)
    else:
        extract_features(ws.path(checkpoint), clips, store)
    artifacts["feature_store"] = ws.rel(store)
    return _report("extract", cfg, artifacts=artifacts, n_clips=len(clips))


def cmd_eval(cfg: ExperimentConfig, ws: Workspace) -> dict:
    clips = _downstream_clips(cfg)
    artifacts, results = {}, {}
    for method in methods_for(cfg, "eval"):
        ck = _checkpoint_for(cfg, ws, method, artifacts)
        results[method] = downstream_runs(cfg, ws, method, clips, ck)
    main_name = main_method(cfg)
    main = results[main_name]["test"]
    comparisons = {m: main.compare(r["test"]) for m, r in results.items() if m != main_name}
    table = [{"method": m, "metric": r["test"].metric_name, "mean": r["test"].mean,
              "std": r["test"].std, "p_vs_main": comparisons.get(m, {}).get("p")}
             for m, r in results.items()]
    return _report("eval", cfg, artifacts=artifacts,
                   results={m: _run_entry(r) for m, r in results.items()},
                   comparisons=comparisons, table=table)


def dedupe_grid(values, name: str) -> tuple[list, list]:
    seen, out, notes = set(), [], []
    for v in values:
        k = round(float(v), 12)
        if k in seen:
            msg = f"{name}: duplicate value {v} removed"
            warnings.warn(msg, stacklevel=2)
            notes.append(msg)
            continue
        seen.add(k)
        out.append(v)
    return out, notes


def cmd_ablate_alpha(cfg: ExperimentConfig, ws: Workspace) -> dict:
    grid, notes = dedupe_grid(cfg.alpha_grid, "alpha_grid")
    clips = _downstream_clips(cfg)
    artifacts, rows = {}, []
    for a in grid:
        ck = _checkpoint_for(cfg, ws, "L1+Odd", artifacts, alpha=a)
        run = downstream_runs(cfg, ws, "L1+Odd", clips, ck)
        rows.append({"alpha": a, "val_mean": run["val"].mean, "val_std": run["val"].std,
                     "test_mean": run["test"].mean, "test_std": run["test"].std,
                     "metric": run["val"].metric_name, "best": False})
    best = max(range(len(rows)), key=lambda i: (rows[i]["val_mean"], -i))
    rows[best]["best"] = True
    return _report("ablate-alpha", cfg, artifacts=artifacts, table=rows, warnings=notes,
                   best_alpha=rows[best]["alpha"])


def cmd_ablate_noise(cfg: ExperimentConfig, ws: Workspace) -> dict:
    snrs, notes = dedupe_grid(cfg.snr_list, "snr_list")
    clean = _downstream_clips(cfg)
    artifacts, rows = {}, []
    checkpoints = {m: _checkpoint_for(cfg, ws, m, artifacts) for m in cfg.noise_methods}
    levels = [None] + sorted(snrs)
    for snr in levels:
        clips = clean if snr is None else add_babble(clean, snr, cfg.babble_sources, cfg.seed)
        for m in cfg.noise_methods:
            run = downstream_runs(cfg, ws, m, clips, checkpoints[m])
            rows.append({"method": m, "snr_db": "clean" if snr is None else snr,
                         "metric": run["test"].metric_name, "mean": run["test"].mean,
                         "std": run["test"].std, "values": run["test"].values})
    return _report("ablate-noise", cfg, artifacts=artifacts, table=rows, warnings=notes)


def cmd_ablate_size(cfg: ExperimentConfig, ws: Workspace) -> dict:
    fractions, notes = dedupe_grid(cfg.fraction_list, "fraction_list")
    fractions = sorted(fractions)
    clips = _downstream_clips(cfg)
    artifacts, rows = {}, []
    # nesting metadata, computed on the clip ids each fraction pretrains on
    subsets = [[c.record.clip_id for c in pretrain_subset(cfg, f, False)] for f in fractions]
    nested = all(set(a) <= set(b) for a, b in zip(subsets, subsets[1:]))
    for f, ids in zip(fractions, subsets):
        for m in cfg.size_methods:
            ck = _checkpoint_for(cfg, ws, m, artifacts, fraction=f)
            sub = dataclasses.replace(cfg, pretrain_fraction=f)
            run = downstream_runs(sub, ws, m, clips, ck)
            rows.append({"method": m, "fraction": f, "n_pretrain_clips": len(ids),
                         "metric": run["test"].metric_name, "mean": run["test"].mean,
                         "std": run["test"].std, "values": run["test"].values})
    meta = {"nested": nested, "subset_sizes": {str(f): len(i) for f, i in zip(fractions,
                                                                               subsets)},
            "subset_digest": {str(f): content_key(sorted(i)) for f, i in zip(fractions,
                                                                               subsets)}}
    return _report("ablate-size", cfg, artifacts=artifacts, table=rows, subsets=meta,
                   warnings=notes)


def cmd_synth_data(cfg: ExperimentConfig, ws: Workspace, which: str = "downstream",
                   out=None) -> dict:
    ref = cfg.pretrain_data if which == "pretrain" else cfg.downstream_data
    if "synthetic" not in ref:
        raise ConfigError(f"{which}_data", "synth-data needs a synthetic data reference")
    out = Path(out) if out else ws.path("corpora", f"{which}-{content_key(ref)}")
    clips = data_mod.generate_synthetic(_synthetic_spec(ref["synthetic"]))
    manifest = data_mod.save_corpus(clips, out)
    return _report("synth-data", cfg, artifacts={"manifest": ws.rel(manifest)},
                   n_clips=len(clips))


COMMANDS = {
    "pretrain": cmd_pretrain,
    "extract": cmd_extract,
    "eval": cmd_eval,
    "ablate-alpha": cmd_ablate_alpha,
    "ablate-noise": cmd_ablate_noise,
    "ablate-size": cmd_ablate_size,
}


# -- report emission -----------------------------------------------------------------

def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def report_csv(report: dict) -> str:
    rows = report.get("table") or []
    buf = io.StringIO()
    if rows:
        cols = [c for c in rows[0] if c != "values"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in cols])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def write_report(report: dict, path) -> list[Path]:
    """Write ``<path>.json`` and ``<path>.csv`` (and a plot for sweeps) atomically."""
    path = Path(path)
    written = [path.with_suffix(".json"), path.with_suffix(".csv")]
    atomic_write(written[0], report_json(report))
    atomic_write(written[1], report_csv(report))
    if report["command"] in ("ablate-noise", "ablate-size", "ablate-alpha"):
        svg = path.with_suffix(".svg")
        atomic_write(svg, plot_svg(report))
        written.append(svg)
    return written


def plot_svg(report: dict) -> str:
    """Vector plot of a sweep table (metric against the swept variable, per method)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = report["table"]
    with matplotlib.rc_context({"svg.hashsalt": "avssl", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        cmd = report["command"]
        if cmd == "ablate-alpha":
            xs = [r["alpha"] for r in rows]
            ax.errorbar(xs, [r["val_mean"] for r in rows], yerr=[r["val_std"] for r in rows],
                        marker="o", capsize=3, label="L1+Odd (validation)")
            ax.set_xlabel("alpha")
        else:
            xkey = "snr_db" if cmd == "ablate-noise" else "fraction"
            for m in dict.fromkeys(r["method"] for r in rows):
                pts = [r for r in rows if r["method"] == m and r[xkey] != "clean"]
                line = ax.errorbar([r[xkey] for r in pts], [r["mean"] for r in pts],
                                   yerr=[r["std"] for r in pts], marker="o", capsize=3,
                                   label=m)
                ref = [r for r in rows if r["method"] == m and r[xkey] == "clean"]
                if ref:
                    ax.axhline(ref[0]["mean"], ls="--", lw=0.8, color=line[0].get_color())
            ax.set_xlabel("SNR (dB)" if cmd == "ablate-noise" else "pretraining fraction")
        ax.set_ylabel(rows[0]["metric"] if rows else "metric")
        ax.legend(fontsize=8)
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return buf.getvalue()


def run_command(command: str, cfg: ExperimentConfig, ws: Workspace) -> dict:
    validate(cfg, command)
    torch.set_num_threads(1)
    return COMMANDS[command](cfg, ws)
