"""Clip records, manifests, speaker-disjoint splits, nested subsetting, and the
procedural audiovisual corpus used for desk-scale experiments."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import EmptySubset, MissingModality, SplitError
from .models import VIDEO_FPS
from .signal import (
    FRAME_RATE,
    SAMPLE_RATE,
    Waveform,
    compute_log_mel,
    hop_samples,
    num_frames,
    read_wav,
    win_samples,
    write_wav,
)

SPLITS = ("train", "val", "test")
FRAME_H, FRAME_W = 64, 128
VIDEO_MAGIC = b"AVSV"

# synthetic layout
MOUTH_ROWS = (34, 54)      # vertical band the mouth opens within
MOUTH_COLS = (44, 84)
MOUTH_MIN, MOUTH_MAX = 2.0, 18.0
EXPR_ROWS, EXPR_COLS = (2, 30), (2, 62)
EXPR_RAMP = 0.3            # expression reaches full strength after this clip fraction
CONTOUR_DEPTH_HZ = 100.0


@dataclass
class ClipRecord:
    clip_id: str
    speaker_id: str
    audio_path: str | None = None
    video_path: str | None = None
    label: int | None = None
    affect_track: list | None = None
    split: str = "train"

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ClipRecord":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown manifest fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Clip:
    """A record with its loaded signals. ``video`` is uint8 (T_v, 3, H, W) or None."""

    record: ClipRecord
    audio: Waveform
    video: np.ndarray | None = None
    _logmel: np.ndarray | None = field(default=None, repr=False)

    @property
    def logmel(self) -> np.ndarray:
        if self._logmel is None:
            self._logmel = compute_log_mel(self.audio).astype(np.float32)
        return self._logmel

    def video_float(self) -> np.ndarray:
        return video_to_float(self.video)


def video_to_float(v: np.ndarray) -> np.ndarray:
    return v.astype(np.float32) / 127.5 - 1.0


def by_split(clips, split: str):
    return [c for c in clips if c.record.split == split]


def check_speaker_disjoint(records):
    owner = {}
    for r in records:
        r = getattr(r, "record", r)
        prev = owner.setdefault(r.speaker_id, r.split)
        if prev != r.split:
            raise SplitError(f"speaker {r.speaker_id!r} appears in both {prev!r} and {r.split!r}")


def require_video(clips):
    missing = [c.record.clip_id for c in clips if c.video is None and not c.record.video_path]
    if missing:
        raise MissingModality(f"{len(missing)} clips have no video (e.g. {missing[0]!r})")


# -- synthetic corpus -----------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    n_speakers: int = 12
    n_classes: int = 4
    clip_seconds: float = 1.0
    clips_per_speaker: int = 24
    split_ratios: tuple = (0.5, 0.25, 0.25)
    with_video: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.n_speakers < 3:
            raise SplitError("need at least 3 speakers for train/val/test")
        if self.clip_seconds * SAMPLE_RATE < win_samples():
            raise ValueError("clip too short for one analysis window")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        return d


def class_base_hz(c: int) -> float:
    return 200.0 + 120.0 * c


def class_contour(c: int, u: np.ndarray) -> np.ndarray:
    """Unit-range pitch contour shape for class ``c`` over normalised time ``u``."""
    shapes = (
        lambda u: 2 * u - 1,
        lambda u: 1 - 2 * u,
        lambda u: 1 - 2 * np.abs(2 * u - 1),
        lambda u: 2 * np.abs(2 * u - 1) - 1,
    )
    return shapes[c % len(shapes)](u)


def syllable_rate(c: int) -> float:
    return 2.0 + 1.5 * c


def class_envelope(c: int, u: np.ndarray, seconds: float, phase: float) -> np.ndarray:
    """Syllabic amplitude envelope in [0, 1]; zero at clip onset and offset."""
    t = u * seconds
    syll = 0.5 - 0.5 * np.cos(2 * np.pi * syllable_rate(c) * t + phase)
    ramp = np.clip(t / 0.08, 0, 1) * np.clip((seconds - t) / 0.08, 0, 1)
    return ramp * (0.15 + 0.85 * syll)


def expression_template(c: int, n_classes: int) -> np.ndarray:
    """Linear gradient in [-1, 1] whose orientation encodes the class."""
    h, w = EXPR_ROWS[1] - EXPR_ROWS[0], EXPR_COLS[1] - EXPR_COLS[0]
    theta = np.pi * c / n_classes
    yy, xx = np.mgrid[0:h, 0:w]
    g = (xx / (w - 1) - 0.5) * np.cos(theta) + (yy / (h - 1) - 0.5) * np.sin(theta)
    return g / np.abs(g).max()


def expression_strength(u: np.ndarray) -> np.ndarray:
    return np.clip(u / EXPR_RAMP, 0.0, 1.0)


def mouth_height(env: np.ndarray) -> np.ndarray:
    return MOUTH_MIN + (MOUTH_MAX - MOUTH_MIN) * env


def _speaker_background(rng) -> np.ndarray:
    yy, xx = np.mgrid[0:FRAME_H, 0:FRAME_W] / np.array([FRAME_H, FRAME_W])[:, None, None]
    bg = np.empty((3, FRAME_H, FRAME_W))
    for ch in range(3):
        fy, fx, ph = rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0), rng.uniform(0, 2 * np.pi)
        bg[ch] = rng.uniform(70, 150) + 30 * np.sin(2 * np.pi * (fy * yy + fx * xx) + ph)
    return bg


def render_video(background: np.ndarray, env_v: np.ndarray, c: int, n_classes: int,
                 n_frames: int) -> np.ndarray:
    """uint8 frames (T_v, 3, H, W): static background, mouth tracking the envelope,
    expression gradient in the top-left corner ramping in from a neutral frame 0."""
    video = np.empty((n_frames, 3, FRAME_H, FRAME_W))
    template = expression_template(c, n_classes)
    strength = expression_strength(np.arange(n_frames) / n_frames)
    rows = np.arange(FRAME_H)[:, None] + 0.5
    centre = 0.5 * (MOUTH_ROWS[0] + MOUTH_ROWS[1])
    r0, r1 = EXPR_ROWS
    c0, c1 = EXPR_COLS
    for j in range(n_frames):
        frame = background.copy()
        half = 0.5 * mouth_height(env_v[j])
        # fractional coverage keeps the rendered height linear in the envelope
        cover = np.clip(half - np.abs(rows - centre) + 0.5, 0.0, 1.0)
        mouth = np.array([200.0, 30.0, 40.0])[:, None, None]
        band = frame[:, :, MOUTH_COLS[0]:MOUTH_COLS[1]]
        frame[:, :, MOUTH_COLS[0]:MOUTH_COLS[1]] = band * (1 - cover) + mouth * cover
        frame[:, r0:r1, c0:c1] = 128.0 + 110.0 * strength[j] * template
        video[j] = frame
    return np.clip(np.round(video), 0, 255).astype(np.uint8)


def measured_mouth_height(frame: np.ndarray) -> float:
    """Recover the rendered mouth height from a uint8 frame (red-minus-green coverage)."""
    band = frame[:, MOUTH_ROWS[0] - 8:MOUTH_ROWS[1] + 8, MOUTH_COLS[0]:MOUTH_COLS[1]].astype(float)
    return float(np.mean(band[0] - band[1], axis=1).sum())


def classify_expression(frame: np.ndarray, n_classes: int) -> int:
    """Template match on the expression corner; argmax of normalised correlation."""
    r0, r1 = EXPR_ROWS
    c0, c1 = EXPR_COLS
    patch = frame[:, r0:r1, c0:c1].astype(float).mean(axis=0)
    patch = patch - patch.mean()
    scores = []
    for c in range(n_classes):
        t = expression_template(c, n_classes)
        t = t - t.mean()
        scores.append(np.sum(patch * t) / np.linalg.norm(t))
    return int(np.argmax(scores))


def feature_frame_times(n_samples: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    t = num_frames(n_samples, sample_rate)
    return (np.arange(t) * hop_samples(sample_rate) + win_samples(sample_rate) / 2) / sample_rate


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> list[Clip]:
    """Deterministic audiovisual corpus, speaker-disjointly split.

    Audio: harmonic tone at ``200 + 120 c`` Hz shifted by a per-speaker pitch factor,
    with a class-specific pitch contour and syllabic envelope, per-speaker harmonic
    timbre, and a low noise floor. ``affect_track`` is the envelope at the 100 Hz
    feature frame times.
    """
    root = np.random.default_rng(spec.seed)
    sr = SAMPLE_RATE
    n = int(round(spec.clip_seconds * sr))
    t = np.arange(n) / sr
    u = t / spec.clip_seconds
    n_frames_v = -(-num_frames(n, sr) // 4)
    frame_u = np.arange(n_frames_v) / n_frames_v
    feat_t = feature_frame_times(n, sr)

    speakers = []
    for s in range(spec.n_speakers):
        rng = np.random.default_rng([spec.seed, 1, s])
        speakers.append({
            "id": f"spk{s:03d}",
            "pitch": rng.uniform(0.75, 1.35),
            "harmonics": np.concatenate([[1.0], rng.uniform(0.15, 0.8, size=3)]),
            "background": _speaker_background(rng) if spec.with_video else None,
        })
    splits = split_speakers([ClipRecord(f"_{s['id']}", s["id"]) for s in speakers],
                            spec.split_ratios, seed=int(root.integers(2**31)))
    split_of = {r.speaker_id: r.split for r in splits}

    clips = []
    for s, spk in enumerate(speakers):
        for k in range(spec.clips_per_speaker):
            rng = np.random.default_rng([spec.seed, 2, s, k])
            c = int((k + s) % spec.n_classes)
            phase = rng.uniform(0, 2 * np.pi)
            env = class_envelope(c, u, spec.clip_seconds, phase)
            f0 = spk["pitch"] * (class_base_hz(c) + CONTOUR_DEPTH_HZ * class_contour(c, u)
                                 + rng.normal(0, 5.0))
            inst_phase = 2 * np.pi * np.cumsum(f0) / sr + rng.uniform(0, 2 * np.pi)
            tone = sum(a * np.sin((h + 1) * inst_phase) for h, a in enumerate(spk["harmonics"]))
            tone = tone / np.sum(spk["harmonics"])
            gain = rng.uniform(0.5, 0.9)
            audio = gain * env * tone + rng.normal(0, 0.002, size=n)
            audio = np.clip(audio, -1.0, 1.0)

            video = None
            if spec.with_video:
                env_v = class_envelope(c, frame_u + 0.5 / n_frames_v, spec.clip_seconds, phase)
                video = render_video(spk["background"], env_v, c, spec.n_classes, n_frames_v)
            env_f = class_envelope(c, feat_t / spec.clip_seconds, spec.clip_seconds, phase)
            track = (env_f / env_f.max()).tolist()
            rec = ClipRecord(clip_id=f"{spk['id']}_{k:04d}", speaker_id=spk["id"], label=c,
                             affect_track=track, split=split_of[spk["id"]])
            clips.append(Clip(rec, Waveform(audio, sr), video))
    return clips


# -- splitting and subsetting ----------------------------------------------------

def split_speakers(records, ratios=(0.8, 0.1, 0.1), seed=0) -> list[ClipRecord]:
    """Assign whole speakers to train/val/test, approximating ``ratios`` at speaker
    granularity. Returns new records; inputs are not modified."""
    speakers = sorted({r.speaker_id for r in records})
    n = len(speakers)
    if n < 3:
        raise SplitError(f"need at least 3 speakers, got {n}")
    ratios = np.asarray(ratios, dtype=float)
    if ratios.shape != (3,) or np.any(ratios < 0) or ratios.sum() <= 0:
        raise SplitError(f"bad split ratios {ratios.tolist()}")
    ratios = ratios / ratios.sum()
    n_val = max(1, int(round(ratios[1] * n)))
    n_test = max(1, int(round(ratios[2] * n)))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise SplitError(f"ratios leave no training speakers out of {n}")
    order = np.random.default_rng(seed).permutation(n)
    assign = {}
    for rank, i in enumerate(order):
        assign[speakers[i]] = "train" if rank < n_train else ("val" if rank < n_train + n_val
                                                               else "test")
    return [dataclasses.replace(r, split=assign[r.speaker_id]) for r in records]


def _unit_hash(clip_id: str, seed: int) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{clip_id}".encode()).digest()[:8], "big")


def nested_order(ids, seed: int) -> list:
    """Seed-stable ordering; any prefix is a subset of every longer prefix."""
    return sorted(ids, key=lambda i: (_unit_hash(i, seed), i))


def subset_fraction(items, fraction: float, what: str = "pretrain_clips", seed=0):
    """Nested subsetting of the train split.

    ``pretrain_clips`` keeps ``round(fraction * n_train)`` train items (other splits pass
    through); ``labels`` keeps every item but strips the label and affect track from
    all but that many train items.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if what not in ("pretrain_clips", "labels"):
        raise ValueError(f"unknown subset target {what!r}")
    recs = [getattr(x, "record", x) for x in items]
    train_ids = [r.clip_id for r in recs if r.split == "train"]
    keep_n = int(round(fraction * len(train_ids)))
    if keep_n == 0:
        raise EmptySubset(f"fraction {fraction} of {len(train_ids)} train clips is empty")
    keep = set(nested_order(train_ids, seed)[:keep_n])
    out = []
    for x, r in zip(items, recs):
        if r.split != "train" or r.clip_id in keep:
            out.append(x)
        elif what == "labels":
            stripped = dataclasses.replace(r, label=None, affect_track=None)
            out.append(dataclasses.replace(x, record=stripped) if isinstance(x, Clip) else stripped)
    return out


def is_labeled(record: ClipRecord) -> bool:
    return record.label is not None or record.affect_track is not None


# -- on-disk formats -------------------------------------------------------------

def write_raw_video(path, video: np.ndarray):
    """``AVSV`` magic, four little-endian uint32 dims (T, C, H, W), then uint8 pixels."""
    video = np.ascontiguousarray(video, dtype=np.uint8)
    if video.ndim != 4:
        raise ValueError("video must be (T, C, H, W)")
    with open(path, "wb") as f:
        f.write(VIDEO_MAGIC + struct.pack("<4I", *video.shape))
        f.write(video.tobytes())


def read_raw_video(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != VIDEO_MAGIC:
        raise ValueError(f"{path}: not a raw video tensor")
    shape = struct.unpack("<4I", data[4:20])
    return np.frombuffer(data[20:], dtype=np.uint8).reshape(shape).copy()


def read_png_video(directory) -> np.ndarray:
    """Frames ``*.png`` in name order, RGB, returned as (T, 3, H, W)."""
    files = sorted(Path(directory).glob("*.png"))
    if not files:
        raise ValueError(f"{directory}: no PNG frames")
    frames = [np.asarray(Image.open(f).convert("RGB")) for f in files]
    return np.stack(frames).transpose(0, 3, 1, 2).copy()


def write_png_video(directory, video: np.ndarray):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for j, frame in enumerate(video):
        Image.fromarray(frame.transpose(1, 2, 0)).save(directory / f"frame_{j:05d}.png")


def read_video(path) -> np.ndarray:
    p = Path(path)
    return read_png_video(p) if p.is_dir() else read_raw_video(p)


def write_manifest(path, records):
    lines = [getattr(r, "record", r).to_json() for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[ClipRecord]:
    records = []
    for i, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(ClipRecord.from_dict(json.loads(line)))
        except (ValueError, TypeError) as e:
            raise ValueError(f"{path}:{i}: {e}") from e
    check_speaker_disjoint(records)
    return records


def save_corpus(clips, directory) -> Path:
    """Write WAVs, raw video tensors and ``manifest.jsonl``; returns the manifest path."""
    directory = Path(directory)
    (directory / "audio").mkdir(parents=True, exist_ok=True)
    records = []
    for c in clips:
        r = c.record
        audio_rel = f"audio/{r.clip_id}.wav"
        write_wav(directory / audio_rel, c.audio)
        video_rel = None
        if c.video is not None:
            (directory / "video").mkdir(exist_ok=True)
            video_rel = f"video/{r.clip_id}.avsv"
            write_raw_video(directory / video_rel, c.video)
        records.append(dataclasses.replace(r, audio_path=audio_rel, video_path=video_rel))
    manifest = directory / "manifest.jsonl"
    write_manifest(manifest, records)
    return manifest


def load_corpus(manifest, load_video: bool = True) -> list[Clip]:
    """Load a manifest; relative paths resolve against the manifest's directory."""
    manifest = Path(manifest)
    base = manifest.parent
    clips = []
    for r in read_manifest(manifest):
        audio = read_wav(base / r.audio_path)
        video = read_video(base / r.video_path) if (load_video and r.video_path) else None
        clips.append(Clip(r, audio, video))
    return clips
