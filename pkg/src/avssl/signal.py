"""Audio frontend: log-mel / MFCC extraction, babble synthesis, SNR mixing and
temporal jumbling of feature frames.

Every function here is a pure function of its inputs and an explicit seed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.fft import dct
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import (
    EmptyPool,
    InputTooShort,
    ShapeError,
    TooShortToJumble,
    ZeroPowerSignal,
)

SAMPLE_RATE = 16000
N_MELS = 80
N_FFT = 512
WIN_MS = 25
HOP_MS = 10
FRAME_RATE = 1000 // HOP_MS
LOG_FLOOR = 1e-10
N_MFCC = 13
DELTA_WIDTH = 2
JUMBLE_FRACTION = 0.15
MAX_JUMBLE_ATTEMPTS = 1000


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size < 1:
            raise ShapeError(f"waveform must be a non-empty 1-D array, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.size

    @property
    def seconds(self) -> float:
        return self.samples.size / self.sample_rate


def _as_waveform(w) -> Waveform:
    return w if isinstance(w, Waveform) else Waveform(np.asarray(w))


def win_samples(sample_rate: int = SAMPLE_RATE) -> int:
    return sample_rate * WIN_MS // 1000


def hop_samples(sample_rate: int = SAMPLE_RATE) -> int:
    return sample_rate * HOP_MS // 1000


def num_frames(n_samples: int, sample_rate: int = SAMPLE_RATE) -> int:
    """Frame count of an un-padded 25 ms / 10 ms analysis."""
    win, hop = win_samples(sample_rate), hop_samples(sample_rate)
    if n_samples < win:
        raise InputTooShort(f"{n_samples} samples is shorter than one {win}-sample window")
    return 1 + (n_samples - win) // hop


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int = SAMPLE_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-scale filterbank, shape (n_mels, n_fft // 2 + 1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    fft_freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, fft_freqs.size))
    for i in range(n_mels):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        rising = (fft_freqs - lo) / (mid - lo)
        falling = (hi - fft_freqs) / (hi - mid)
        fb[i] = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=8)
def _hann(n: int) -> np.ndarray:
    # periodic Hann, the usual STFT choice
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    w.setflags(write=False)
    return w


def frame_signal(samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    win, hop = win_samples(sample_rate), hop_samples(sample_rate)
    t = num_frames(samples.size, sample_rate)
    idx = np.arange(win)[None, :] + hop * np.arange(t)[:, None]
    return samples[idx]


def compute_log_mel(w) -> np.ndarray:
    """Natural-log mel energies, shape (t, 80), 100 frames per second."""
    w = _as_waveform(w)
    frames = frame_signal(w.samples, w.sample_rate) * _hann(win_samples(w.sample_rate))
    n_fft = max(N_FFT, 1 << (frames.shape[1] - 1).bit_length())
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    mel = power @ mel_filterbank(w.sample_rate, n_fft).T
    return np.log(np.maximum(mel, LOG_FLOOR))


def deltas(feats: np.ndarray, width: int = DELTA_WIDTH) -> np.ndarray:
    """Regression deltas over +-width frames with edge replication."""
    feats = np.asarray(feats, dtype=np.float64)
    t = feats.shape[0]
    padded = np.pad(feats, ((width, width), (0, 0)), mode="edge")
    denom = 2.0 * sum(n * n for n in range(1, width + 1))
    out = np.zeros_like(feats)
    for n in range(1, width + 1):
        out += n * (padded[width + n:width + n + t] - padded[width - n:width - n + t])
    return out / denom


def compute_mfcc(w) -> np.ndarray:
    """13 cepstra + deltas + delta-deltas, shape (t, 39)."""
    logmel = compute_log_mel(w)
    base = dct(logmel, type=2, axis=1, norm="ortho")[:, :N_MFCC]
    d1 = deltas(base)
    d2 = deltas(d1)
    return np.concatenate([base, d1, d2], axis=1)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _fit_length(x: np.ndarray, n: int, offset: int) -> np.ndarray:
    """Circularly read ``n`` samples of ``x`` starting at ``offset``."""
    return x[(offset + np.arange(n)) % x.size]


def synth_babble(pool, m: int = 6, target_len: int = SAMPLE_RATE, seed=0) -> Waveform:
    """Multi-talker babble: sum of ``m`` randomly chosen, randomly offset
    pool clips, peak-normalised. ``target_len`` is in samples."""
    pool = [_as_waveform(p) for p in pool]
    if not pool:
        raise EmptyPool("babble pool is empty")
    if not 1 <= m <= len(pool):
        raise ValueError(f"need 1 <= m <= pool size ({len(pool)}), got m={m}")
    rng = _rng(seed)
    chosen = rng.choice(len(pool), size=m, replace=False)
    out = np.zeros(target_len)
    for i in chosen:
        x = pool[int(i)].samples
        out += _fit_length(x, target_len, int(rng.integers(x.size)))
    peak = np.max(np.abs(out))
    if peak > 0:
        out = out / peak
    return Waveform(out, pool[0].sample_rate)


def mix_at_snr(clean, noise, snr_db: float) -> Waveform:
    """``clean + g * noise`` with ``g`` set so the mixture has the requested SNR.

    Noise shorter than the clean signal is tiled.
    """
    clean, noise = _as_waveform(clean), _as_waveform(noise)
    if clean.sample_rate != noise.sample_rate:
        raise ValueError("clean and noise sample rates differ")
    seg = _fit_length(noise.samples, clean.samples.size, 0)
    p_clean = np.mean(clean.samples ** 2)
    p_noise = np.mean(seg ** 2)
    if p_clean == 0 or p_noise == 0:
        raise ZeroPowerSignal("cannot set an SNR against a zero-power signal")
    gain = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform(clean.samples + gain * seg, clean.sample_rate)


@dataclass(frozen=True)
class JumbleSpec:
    start_a: int
    start_b: int
    window_len: int
    window_fraction: float = JUMBLE_FRACTION

    def check(self, t: int):
        a, b, n = self.start_a, self.start_b, self.window_len
        if n < 1 or min(a, b) < 0 or max(a, b) + n > t:
            raise TooShortToJumble(f"windows {self} do not fit in {t} frames")
        if abs(a - b) < n:
            raise ValueError(f"jumble windows overlap: {self}")


def jumble_window_len(t: int, fraction: float = JUMBLE_FRACTION) -> int:
    return max(1, int(np.floor(fraction * t + 0.5)))


def draw_jumble_spec(t: int, seed=0, fraction: float = JUMBLE_FRACTION) -> JumbleSpec:
    if not 0 < fraction <= 0.5:
        raise ValueError("window fraction must lie in (0, 0.5]")
    n = jumble_window_len(t, fraction)
    if t < 2 * n:
        raise TooShortToJumble(f"{t} frames cannot host two disjoint {n}-frame windows")
    rng = _rng(seed)
    for _ in range(MAX_JUMBLE_ATTEMPTS):
        a, b = (int(v) for v in rng.integers(0, t - n + 1, size=2))
        if abs(a - b) >= n:
            return JumbleSpec(a, b, n, fraction)
    return JumbleSpec(0, t - n, n, fraction)


def jumble(x: np.ndarray, spec: JumbleSpec | None = None, seed=0):
    """Swap two disjoint frame windows of ``x`` (frames along axis 0).

    Returns the jumbled copy and the spec that was applied.
    """
    x = np.asarray(x)
    if spec is None:
        spec = draw_jumble_spec(x.shape[0], seed)
    spec.check(x.shape[0])
    a, b, n = spec.start_a, spec.start_b, spec.window_len
    out = x.copy()
    out[a:a + n] = x[b:b + n]
    out[b:b + n] = x[a:a + n]
    return out, spec


# -- I/O ---------------------------------------------------------------------

def read_wav(path, target_rate: int = SAMPLE_RATE) -> Waveform:
    """Read a 16-bit PCM WAV (mono or first channel), resampling to ``target_rate``."""
    rate, data = wavfile.read(str(path))
    if data.dtype != np.int16:
        raise ValueError(f"{path}: expected 16-bit PCM, got {data.dtype}")
    if data.ndim > 1:
        data = data[:, 0]
    samples = data.astype(np.float64) / 32768.0
    if rate != target_rate:
        g = np.gcd(rate, target_rate)
        samples = resample_poly(samples, target_rate // g, rate // g)
    return Waveform(samples, target_rate)


def write_wav(path, w: Waveform):
    w = _as_waveform(w)
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), w.sample_rate, pcm)


def save_features(path, frames: np.ndarray, frame_rate: int = FRAME_RATE):
    """Write ``<path>.f32`` (little-endian float32, row-major) plus ``<path>.json``."""
    path = Path(path)
    arr = np.ascontiguousarray(frames, dtype="<f4")
    path.with_suffix(".f32").write_bytes(arr.tobytes())
    header = {"shape": list(arr.shape), "dtype": "float32", "byte_order": "little",
              "frame_rate": frame_rate}
    path.with_suffix(".json").write_text(json.dumps(header, sort_keys=True))


def load_features(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    data = np.frombuffer(path.with_suffix(".f32").read_bytes(), dtype="<f4")
    return data.reshape(header["shape"]).astype(np.float32), header
