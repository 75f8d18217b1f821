"""Training engine: self-supervised pretraining, feature extraction, downstream
training in frozen / finetune / scratch modes, and repeated-run summaries."""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from . import metrics
from .data import Clip, is_labeled, require_video, video_to_float
from .errors import (
    AlignmentError,
    BatchTooSmall,
    CheckpointError,
    MissingLabels,
    ModeViolation,
    ShapeError,
    TrainingDiverged,
)
from .models import (
    AudioEncoder,
    BGRUClassifier,
    BGRURegressor,
    ModelConfig,
    PretextModel,
    load_audio_encoder,
    parameter_digest,
    save_checkpoint,
    video_frames_for,
)
from .pretext import (
    ReconBatch,
    build_odd_groups,
    l1_reconstruction_loss,
    multitask_loss,
    odd_accuracy,
    odd_one_out_loss,
    sample_frame_indices,
)
from .signal import compute_mfcc, save_features, load_features

log = logging.getLogger(__name__)

TASKS = ("L1", "Odd", "L1+Odd")
MODES = ("frozen", "finetune", "scratch")


@dataclass
class PretrainSchedule:
    epochs: int = 100
    lr0: float = 0.06
    decay: float = 0.98
    decay_every: int = 10
    batch_size: int = 32
    group_size: int = 4
    clip_norm: float | None = None  # global gradient-norm cap; None disables

    def lr(self, epoch: int) -> float:
        return self.lr0 * self.decay ** (epoch // self.decay_every)


@dataclass
class DownstreamSchedule:
    epochs: int = 100
    lr0: float = 1e-4
    decay: float = 0.1
    decay_every: int = 40
    batch_size: int = 64

    def lr(self, epoch: int) -> float:
        return self.lr0 * self.decay ** (epoch // self.decay_every)


def derive_seed(master: int, index: int) -> int:
    """Counter-based per-run seed from a master seed."""
    return int(np.random.SeedSequence([int(master), int(index)]).generate_state(1)[0])


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def _pad(seqs, dtype=torch.float32):
    lengths = [s.shape[0] for s in seqs]
    out = np.zeros((len(seqs), max(lengths), seqs[0].shape[1]), dtype=np.float32)
    for i, s in enumerate(seqs):
        out[i, :s.shape[0]] = s
    return torch.as_tensor(out, dtype=dtype), lengths


def _check_finite(loss, where):
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss ({float(loss)}) at {where}")


# -- pretraining ---------------------------------------------------------------------

@dataclass
class PretrainResult:
    model: PretextModel
    task: str
    alpha: float
    total_trace: list
    video_trace: list
    audio_trace: list
    checkpoint: Path | None = None


def _recon_batch(clips, seed) -> ReconBatch:
    audio, _ = _pad([c.logmel for c in clips])
    t_v = [c.video.shape[0] for c in clips]
    for c, n in zip(clips, t_v):
        if video_frames_for(c.logmel.shape[0]) != n:
            raise AlignmentError(f"clip {c.record.clip_id}: {c.logmel.shape[0]} audio frames vs "
                                 f"{n} video frames")
    width = video_frames_for(audio.shape[1])
    video = np.zeros((len(clips), width) + clips[0].video.shape[1:], dtype=np.float32)
    for i, c in enumerate(clips):
        video[i, :c.video.shape[0]] = video_to_float(c.video)
    rng = np.random.default_rng(seed)
    idx = torch.as_tensor([int(rng.integers(n)) for n in t_v], dtype=torch.long)
    still = torch.as_tensor(video[:, 0])
    return ReconBatch(still, audio, torch.as_tensor(video), idx)


def pretrain(task: str, clips, alpha: float = 0.67, schedule: PretrainSchedule | None = None,
             seed: int = 0, model_cfg: ModelConfig | None = None, checkpoint_path=None,
             config_echo: dict | None = None) -> PretrainResult:
    """Self-supervised pretraining on ``clips`` with the L1, Odd or L1+Odd objective."""
    if task not in TASKS:
        raise ValueError(f"unknown pretext task {task!r}; expected one of {TASKS}")
    schedule = schedule or PretrainSchedule()
    model_cfg = model_cfg or ModelConfig()
    use_video = task in ("L1", "L1+Odd")
    use_odd = task in ("Odd", "L1+Odd")
    if use_video:
        require_video(clips)
    if use_odd and len(clips) < schedule.group_size:
        raise BatchTooSmall(f"{len(clips)} clips cannot form an odd-one-out group")
    if task == "L1+Odd":
        multitask_loss(0.0, 0.0, alpha)  # validates alpha

    torch.manual_seed(seed)
    model = PretextModel(model_cfg)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=schedule.lr0)
    order_rng = np.random.default_rng([seed, 0])
    n = len(clips)
    totals, videos, audios = [], [], []
    for epoch in range(schedule.epochs):
        _set_lr(opt, schedule.lr(epoch))
        perm = order_rng.permutation(n)
        sums = np.zeros(3)
        steps = 0
        for step, lo in enumerate(range(0, n, schedule.batch_size)):
            batch = [clips[i] for i in perm[lo:lo + schedule.batch_size]]
            if use_odd and len(batch) < schedule.group_size:
                continue
            l_video = l_audio = None
            if use_video:
                rb = _recon_batch(batch, [seed, 1, epoch, step])
                noise_seed = derive_seed(seed, 1_000_000 + epoch * 10_000 + step)
                l_video = l1_reconstruction_loss(rb, model, seed=noise_seed)
            if use_odd:
                groups = build_odd_groups([c.logmel for c in batch], schedule.group_size,
                                          seed=np.random.default_rng([seed, 2, epoch, step]))
                l_audio = odd_one_out_loss(groups, model.audio_encoder, model.odd_scorer)
            if task == "L1":
                loss = l_video
            elif task == "Odd":
                loss = l_audio
            else:
                loss = multitask_loss(l_video, l_audio, alpha)
            _check_finite(loss, f"epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            if schedule.clip_norm is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), schedule.clip_norm)
            opt.step()
            sums += [float(loss.detach()),
                     float(l_video.detach()) if l_video is not None else 0.0,
                     float(l_audio.detach()) if l_audio is not None else 0.0]
            steps += 1
        means = sums / max(steps, 1)
        totals.append(float(means[0]))
        videos.append(float(means[1]) if use_video else None)
        audios.append(float(means[2]) if use_odd else None)
        log.info("pretrain %s epoch %d lr %.4g loss %.4f", task, epoch, schedule.lr(epoch),
                 means[0])
    model.eval()
    result = PretrainResult(model, task, alpha, totals, videos, audios)
    if checkpoint_path is not None:
        cfg = {"model": model_cfg.to_dict(), "task": task, "alpha": alpha, "seed": seed,
               "schedule": dataclasses.asdict(schedule)}
        if config_echo:
            cfg["experiment"] = config_echo
        save_checkpoint(checkpoint_path, model, cfg,
                        extra={"total_trace": totals, "video_trace": videos,
                               "audio_trace": audios})
        result.checkpoint = Path(checkpoint_path)
    return result


def random_init_encoder(model_cfg: ModelConfig, seed: int = 0) -> AudioEncoder:
    """An untrained encoder, initialised exactly as pretraining would initialise it."""
    torch.manual_seed(seed)
    enc = PretextModel(model_cfg).audio_encoder
    enc.eval()
    return enc


def evaluate_odd(encoder, scorer, clips, group_size: int = 4, seed: int = 0,
                 repeats: int = 1) -> float:
    """Odd-one-out accuracy on freshly drawn groups of ``clips``."""
    accs = []
    for r in range(repeats):
        rng = np.random.default_rng([seed, 3, r])
        perm = rng.permutation(len(clips))
        groups = build_odd_groups([clips[i].logmel for i in perm], group_size, seed=rng)
        accs.append(odd_accuracy(groups, encoder, scorer))
    return float(np.mean(accs))


# -- feature extraction ------------------------------------------------------------

def encode(encoder: AudioEncoder, logmels, batch_size: int = 64) -> list[np.ndarray]:
    """Inference-mode encoder features per sequence, trimmed to each input length."""
    encoder.eval()
    out = []
    with torch.no_grad():
        for lo in range(0, len(logmels), batch_size):
            chunk = logmels[lo:lo + batch_size]
            x, lengths = _pad(chunk, next(encoder.parameters()).dtype)
            z = encoder(x).float().numpy()
            out.extend(z[i, :n].copy() for i, n in enumerate(lengths))
    return out


class FeatureStore:
    """Directory of float32 arrays plus an ``index.json`` of clip metadata."""

    INDEX = "index.json"

    def __init__(self, root):
        self.root = Path(root)

    def write(self, clips, features, meta: dict | None = None):
        self.root.mkdir(parents=True, exist_ok=True)
        index = {}
        for c, f in zip(clips, features):
            r = c.record
            stem = r.clip_id
            save_features(self.root / stem, f)
            index[r.clip_id] = {"file": stem, "shape": list(f.shape), "label": r.label,
                                "split": r.split, "speaker_id": r.speaker_id,
                                "affect_track": r.affect_track}
        body = {"clips": index, "meta": meta or {}}
        tmp = self.root / (self.INDEX + ".tmp")
        tmp.write_text(json.dumps(body, sort_keys=True))
        tmp.replace(self.root / self.INDEX)
        return self

    def index(self) -> dict:
        return json.loads((self.root / self.INDEX).read_text())

    def load(self) -> dict:
        """clip_id -> (features, entry)."""
        out = {}
        for cid, entry in self.index()["clips"].items():
            arr, _ = load_features(self.root / entry["file"])
            out[cid] = (arr, entry)
        return out


FEATURE_KINDS = ("encoder", "mfcc", "logmel")


def extract_features(checkpoint, clips, store_dir=None, kind: str = "encoder"):
    """Encoder (or MFCC / log-mel) features for every clip; optionally persisted as a
    FeatureStore. ``checkpoint`` may be a path or an already-loaded AudioEncoder.
    """
    if kind not in FEATURE_KINDS:
        raise ValueError(f"unknown feature kind {kind!r}")
    if kind == "mfcc":
        feats = [compute_mfcc(c.audio).astype(np.float32) for c in clips]
        meta = {"kind": "mfcc"}
    elif kind == "logmel":
        feats = [c.logmel for c in clips]
        meta = {"kind": "logmel"}
    else:
        if isinstance(checkpoint, AudioEncoder):
            encoder, meta = checkpoint, {"kind": "encoder"}
        else:
            encoder, ck_meta = load_audio_encoder(checkpoint)
            meta = {"kind": "encoder", "checkpoint_config": ck_meta.get("config")}
        feats = encode(encoder, [c.logmel for c in clips])
    for f in feats:
        if not np.all(np.isfinite(f)):
            raise CheckpointError("extracted features are non-finite")
    if store_dir is not None:
        FeatureStore(store_dir).write(clips, feats, meta)
    return feats


def standardize(features, clips, eps: float = 1e-5) -> list[np.ndarray]:
    """Z-score every feature dimension with frame statistics pooled over train-split clips."""
    train = [f for f, c in zip(features, clips) if c.record.split == "train"]
    if not train:
        raise MissingLabels("no train-split clips to estimate feature statistics")
    pooled = np.concatenate(train).astype(np.float64)
    mu, sd = pooled.mean(axis=0), pooled.std(axis=0) + eps
    return [((f - mu) / sd).astype(np.float32) for f in features]


# -- downstream --------------------------------------------------------------------

@dataclass
class SplitData:
    x: list
    y: list


@dataclass
class DownstreamData:
    """Per-split input sequences and targets (class ids or per-frame tracks)."""

    train: SplitData
    val: SplitData
    test: SplitData
    n_classes: int = 0

    @classmethod
    def from_clips(cls, clips, inputs, task: str, n_classes: int = 0) -> "DownstreamData":
        """``inputs`` parallels ``clips`` (features or log-mels). Unlabeled clips are dropped."""
        parts = {}
        for split in ("train", "val", "test"):
            xs, ys = [], []
            for c, x in zip(clips, inputs):
                r = c.record
                if r.split != split:
                    continue
                y = r.label if task == "classify" else r.affect_track
                if y is None:
                    continue
                xs.append(x)
                ys.append(np.asarray(y, dtype=np.float32) if task == "regress" else int(y))
            parts[split] = SplitData(xs, ys)
        if task == "classify" and not n_classes:
            labels = [y for p in parts.values() for y in p.y]
            n_classes = (max(labels) + 1) if labels else 0
        return cls(parts["train"], parts["val"], parts["test"], n_classes)


@dataclass
class DownstreamResult:
    head: torch.nn.Module
    encoder: AudioEncoder | None
    best_epoch: int
    val_trace: list
    val_metric: float
    test_metrics: dict
    encoder_digest_before: str | None = None
    encoder_digest_after: str | None = None


def _forward(head, encoder, xb, lengths):
    if encoder is not None:
        xb = encoder(xb)
    return head(xb, lengths)


def _regress_loss(pred, ys, lengths):
    losses = []
    for i, n in enumerate(lengths):
        y = torch.as_tensor(ys[i], dtype=pred.dtype)
        losses.append(metrics.ccc_loss_torch(y, pred[i, :n]))
    return torch.stack(losses).mean()


def _align_track(track, n):
    if len(track) != n:
        raise ShapeError(f"affect track has {len(track)} frames, input has {n}")
    return track


def _evaluate(task, head, encoder, split: SplitData, n_classes, batch_size=128) -> dict:
    head.eval()
    if encoder is not None:
        encoder.eval()
    preds, tracks = [], []
    with torch.no_grad():
        for lo in range(0, len(split.x), batch_size):
            xb, lengths = _pad(split.x[lo:lo + batch_size], next(head.parameters()).dtype)
            out = _forward(head, encoder, xb, lengths)
            if task == "classify":
                preds.extend(out.argmax(-1).tolist())
            else:
                tracks.extend(out[i, :n].numpy() for i, n in enumerate(lengths))
    if task == "classify":
        return {"macro_f1": metrics.macro_f1(preds, split.y, n_classes),
                "accuracy": metrics.accuracy(preds, split.y)}
    y = np.concatenate([np.asarray(t) for t in split.y])
    return {"ccc": metrics.ccc(y, np.concatenate(tracks)).ccc}


def selection_metric(task: str) -> str:
    return "macro_f1" if task == "classify" else "ccc"


def train_downstream(task: str, data: DownstreamData, mode: str = "frozen",
                     schedule: DownstreamSchedule | None = None, seed: int = 0,
                     encoder: AudioEncoder | None = None, model_cfg: ModelConfig | None = None,
                     hidden: int | None = None, layers: int | None = None) -> DownstreamResult:
    """Train a BGRU head; keep the epoch with the best validation metric.

    frozen   -- ``data`` holds precomputed features; if ``encoder`` is given, ``data``
                holds log-mels and the encoder is used as a locked feature extractor.
    finetune -- ``encoder`` (pretrained) is trained end-to-end with the head.
    scratch  -- a freshly initialised encoder is trained end-to-end.
    """
    if task not in ("classify", "regress"):
        raise ValueError(f"unknown downstream task {task!r}")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if not data.train.x or not data.val.x:
        raise MissingLabels("downstream training needs labeled train and val clips")
    if task == "classify" and data.n_classes < 2:
        raise MissingLabels("classification needs at least two classes")
    schedule = schedule or DownstreamSchedule()
    model_cfg = model_cfg or (encoder.cfg if encoder is not None else ModelConfig())
    hidden = hidden or model_cfg.down_hidden
    layers = layers or model_cfg.down_layers

    digest_before = None
    if mode == "frozen" and encoder is not None:
        digest_before = parameter_digest(encoder)
        locked = encoder
        data = DownstreamData(*(SplitData(encode(locked, s.x), s.y)
                                for s in (data.train, data.val, data.test)), data.n_classes)
        encoder = None
    elif mode == "finetune":
        if encoder is None:
            raise ValueError("finetune mode needs a pretrained encoder")
        encoder = copy.deepcopy(encoder)
        digest_before = parameter_digest(encoder)
    elif mode == "scratch":
        encoder = random_init_encoder(model_cfg, seed=derive_seed(seed, 7))
        digest_before = parameter_digest(encoder)

    in_dim = data.train.x[0].shape[1] if encoder is None else model_cfg.feat_dim
    if encoder is not None and data.train.x[0].shape[1] != model_cfg.n_mels:
        raise ShapeError("finetune/scratch modes take log-mel inputs")
    if task == "regress":
        for s in (data.train, data.val, data.test):
            for x, y in zip(s.x, s.y):
                _align_track(y, x.shape[0])

    torch.manual_seed(seed)
    head = (BGRUClassifier(in_dim, data.n_classes, hidden, layers) if task == "classify"
            else BGRURegressor(in_dim, hidden, layers))
    params = list(head.parameters()) + (list(encoder.parameters()) if encoder is not None else [])
    opt = torch.optim.Adam(params, lr=schedule.lr0)
    rng = np.random.default_rng([seed, 5])
    key = selection_metric(task)
    best, best_epoch, best_state, trace = -np.inf, -1, None, []
    n = len(data.train.x)
    for epoch in range(schedule.epochs):
        _set_lr(opt, schedule.lr(epoch))
        head.train()
        if encoder is not None:
            encoder.train()
        perm = rng.permutation(n)
        for step, lo in enumerate(range(0, n, schedule.batch_size)):
            idx = perm[lo:lo + schedule.batch_size]
            xb, lengths = _pad([data.train.x[i] for i in idx])
            out = _forward(head, encoder, xb, lengths)
            if task == "classify":
                loss = F.cross_entropy(out, torch.as_tensor([data.train.y[i] for i in idx]))
            else:
                loss = _regress_loss(out, [data.train.y[i] for i in idx], lengths)
            _check_finite(loss, f"downstream epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        score = _evaluate(task, head, encoder, data.val, data.n_classes)[key]
        trace.append(score)
        if score > best:
            best, best_epoch = score, epoch
            best_state = (copy.deepcopy(head.state_dict()),
                          copy.deepcopy(encoder.state_dict()) if encoder is not None else None)
    head.load_state_dict(best_state[0])
    if encoder is not None:
        encoder.load_state_dict(best_state[1])
    test = _evaluate(task, head, encoder, data.test, data.n_classes)
    result = DownstreamResult(head, encoder, best_epoch, trace, float(best), test,
                              encoder_digest_before=digest_before)
    if mode == "frozen" and digest_before is not None:
        result.encoder_digest_after = parameter_digest(locked)
        if result.encoder_digest_after != digest_before:
            raise ModeViolation("frozen encoder parameters changed during downstream training")
    elif encoder is not None:
        result.encoder_digest_after = parameter_digest(encoder)
    return result


def run_repeated(experiment: Callable[[int], float], n_runs: int = 10, master_seed: int = 0,
                 metric_name: str = "metric", compare_to: metrics.RunReport | None = None):
    """Run ``experiment(seed)`` with derived seeds; returns a RunReport (and the paired
    t-test against ``compare_to`` when given)."""
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    seeds = [derive_seed(master_seed, i) for i in range(n_runs)]
    report = metrics.RunReport(metric_name, [experiment(s) for s in seeds], seeds)
    if compare_to is not None:
        return report, report.compare(compare_to)
    return report
