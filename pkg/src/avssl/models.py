"""Neural building blocks: audio encoder, identity encoder, noise generator,
frame decoder, odd-one-out scorer and downstream BGRU heads."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from torch.nn.utils.rnn import pack_padded_sequence

from .errors import AlignmentError, CheckpointError, GroupTooSmall, ShapeError

VIDEO_FPS = 25
AUDIO_TO_VIDEO_STRIDE = 4
CHECKPOINT_FORMAT = "avssl-ckpt/1"


@dataclass
class ModelConfig:
    n_mels: int = 80
    enc_hidden: int = 512
    enc_layers: int = 3
    feat_dim: int = 512
    id_dim: int = 64
    noise_dim: int = 10
    noise_var: float = 0.33
    id_channels: tuple = (32, 64, 128, 256, 512, 512)
    frame_hw: tuple = (64, 128)
    scorer_hidden: int = 128
    down_hidden: int = 256
    down_layers: int = 2
    # fixed affine applied to log-mel input (x - shift) / scale
    input_shift: float = 0.0
    input_scale: float = 1.0

    @property
    def latent_dim(self) -> int:
        return self.feat_dim + self.id_dim + self.noise_dim

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["id_channels"] = list(self.id_channels)
        d["frame_hw"] = list(self.frame_hw)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("id_channels", "frame_hw"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def canonical_config() -> ModelConfig:
    return ModelConfig()


def desk_config() -> ModelConfig:
    """Reduced widths for single-core CPU experiments; interfaces unchanged."""
    return ModelConfig(enc_hidden=64, enc_layers=3, feat_dim=64,
                       id_channels=(8, 16, 16, 32, 32, 32), scorer_hidden=32,
                       down_hidden=32, down_layers=2, input_shift=-4.0, input_scale=4.0)


PRESETS = {"canonical": canonical_config, "desk": desk_config}


def _check_last_dim(x: torch.Tensor, d: int, what: str):
    if x.shape[-1] != d:
        raise ShapeError(f"{what}: expected last dimension {d}, got shape {tuple(x.shape)}")


def _batched(x: torch.Tensor, ndim: int):
    """Add a leading batch axis when ``x`` is a single example."""
    if x.dim() == ndim - 1:
        return x.unsqueeze(0), True
    if x.dim() != ndim:
        raise ShapeError(f"expected {ndim - 1}-D or {ndim}-D input, got shape {tuple(x.shape)}")
    return x, False


class AudioEncoder(nn.Module):
    """Unidirectional GRU stack + per-frame linear map: (B, t, 80) -> (B, t, feat_dim).

    Causal: output frame i depends only on input frames <= i.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.gru = nn.GRU(cfg.n_mels, cfg.enc_hidden, cfg.enc_layers, batch_first=True)
        self.fc = nn.Linear(cfg.enc_hidden, cfg.feat_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x, single = _batched(x, 3)
        _check_last_dim(x, self.cfg.n_mels, "audio encoder")
        x = (x - self.cfg.input_shift) / self.cfg.input_scale
        h, _ = self.gru(x)
        z = self.fc(h)
        return z[0] if single else z


class IdentityEncoder(nn.Module):
    """Six stride-2 Conv-BN-ReLU blocks on the still frame, then a linear map to ``id_dim``.

    Returns ``(embedding, skips)`` with one skip map per block, largest first.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        blocks, c_in = [], 3
        for c_out in cfg.id_channels:
            blocks.append(nn.Sequential(
                nn.Conv2d(c_in, c_out, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(c_out),
                nn.ReLU(inplace=False),
            ))
            c_in = c_out
        self.blocks = nn.ModuleList(blocks)
        h, w = cfg.frame_hw
        n = len(cfg.id_channels)
        self.bottom_hw = (h >> n, w >> n)
        self.proj = nn.Linear(c_in * self.bottom_hw[0] * self.bottom_hw[1], cfg.id_dim)

    def forward(self, frame: torch.Tensor):
        frame, single = _batched(frame, 4)
        if tuple(frame.shape[1:]) != (3, *self.cfg.frame_hw):
            raise ShapeError(f"identity encoder expects (3, {self.cfg.frame_hw[0]}, "
                             f"{self.cfg.frame_hw[1]}) frames, got {tuple(frame.shape[1:])}")
        skips, x = [], frame
        for block in self.blocks:
            x = block(x)
            skips.append(x)
        emb = self.proj(x.flatten(1))
        if single:
            return emb[0], [s[0] for s in skips]
        return emb, skips


class NoiseGenerator(nn.Module):
    """Gaussian draws (mean 0, variance ``noise_var``) through a one-layer GRU."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.gru = nn.GRU(cfg.noise_dim, cfg.noise_dim, 1, batch_first=True)

    def sample(self, n_frames: int, batch: int = 1, generator: torch.Generator | None = None,
               dtype=None) -> torch.Tensor:
        dtype = dtype or self.gru.weight_ih_l0.dtype
        eps = torch.randn(batch, n_frames, self.cfg.noise_dim, generator=generator, dtype=dtype)
        return eps * float(np.sqrt(self.cfg.noise_var))

    def forward(self, n_frames: int, batch: int = 1, seed: int | None = None,
                generator: torch.Generator | None = None) -> torch.Tensor:
        if n_frames < 1:
            raise ValueError("need at least one video frame")
        if generator is None and seed is not None:
            generator = torch.Generator().manual_seed(int(seed))
        z, _ = self.gru(self.sample(n_frames, batch, generator))
        return z


def video_frames_for(t_audio: int) -> int:
    """Number of video rows produced by stride-4 subsampling of ``t_audio`` frames."""
    return -(-t_audio // AUDIO_TO_VIDEO_STRIDE)


def downsample_to_video(z_aud: torch.Tensor) -> torch.Tensor:
    return z_aud[..., ::AUDIO_TO_VIDEO_STRIDE, :]


def assemble_latent(z_aud: torch.Tensor, z_id: torch.Tensor, z_n: torch.Tensor) -> torch.Tensor:
    """Concatenate ``[z_aud | z_id | z_n]`` per video frame.

    ``z_aud`` is at audio rate and is subsampled by 4; ``z_id`` is broadcast over time.
    Accepts single examples ((t, D), (64,), (T_v, 10)) or batches.
    """
    single = z_aud.dim() == 2
    if single:
        z_aud, z_id, z_n = z_aud[None], z_id[None], z_n[None]
    z_vid = downsample_to_video(z_aud)
    if z_vid.shape[1] != z_n.shape[1]:
        raise AlignmentError(f"audio gives {z_vid.shape[1]} video frames but noise code has "
                             f"{z_n.shape[1]}")
    if not (z_vid.shape[0] == z_id.shape[0] == z_n.shape[0]):
        raise AlignmentError("batch sizes differ between latent parts")
    z_idt = z_id[:, None, :].expand(-1, z_vid.shape[1], -1)
    code = torch.cat([z_vid, z_idt, z_n], dim=-1)
    return code[0] if single else code


class FrameDecoder(nn.Module):
    """Latent code -> frame with transposed convolutions and U-Net skips from the
    identity encoder. Output is tanh-bounded to [-1, 1]."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        chans = list(cfg.id_channels)
        h, w = cfg.frame_hw
        n = len(chans)
        self.bottom_hw = (h >> n, w >> n)
        self.bottom_ch = chans[-1]
        self.fc = nn.Linear(cfg.latent_dim, self.bottom_ch * self.bottom_hw[0] * self.bottom_hw[1])
        ups, c_in = [], self.bottom_ch
        # deepest skip first; each stage doubles resolution
        out_chans = chans[-2::-1] + [chans[0]]
        for skip_ch, c_out in zip(chans[::-1], out_chans):
            ups.append(nn.Sequential(
                nn.ConvTranspose2d(c_in + skip_ch, c_out, 4, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(c_out),
                nn.ReLU(inplace=False),
            ))
            c_in = c_out
        self.ups = nn.ModuleList(ups)
        self.out = nn.Conv2d(c_in, 3, 3, padding=1)

    def forward(self, code: torch.Tensor, skips) -> torch.Tensor:
        """``code``: (N, latent) or (T_v, latent) for one video; ``skips``: per-frame maps
        (N, C, h, w) or one still's maps (C, h, w) broadcast over N."""
        _check_last_dim(code, self.cfg.latent_dim, "frame decoder")
        if code.dim() != 2:
            raise ShapeError(f"frame decoder expects (N, {self.cfg.latent_dim}) codes")
        if len(skips) != len(self.ups):
            raise ShapeError(f"expected {len(self.ups)} skip maps, got {len(skips)}")
        n = code.shape[0]
        x = self.fc(code).view(n, self.bottom_ch, *self.bottom_hw)
        for up, skip in zip(self.ups, reversed(skips)):
            if skip.dim() == 3:
                skip = skip.unsqueeze(0).expand(n, -1, -1, -1)
            x = up(torch.cat([x, skip], dim=1))
        return torch.tanh(self.out(x))


class OddScorer(nn.Module):
    """Shared per-clip scoring map: (B, K, D) -> (B, K)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.net = nn.Sequential(
            nn.Linear(cfg.feat_dim, cfg.scorer_hidden),
            nn.ReLU(),
            nn.Linear(cfg.scorer_hidden, 1),
        )

    def forward(self, clip_summaries: torch.Tensor) -> torch.Tensor:
        x, single = _batched(clip_summaries, 3)
        if x.shape[1] < 2:
            raise GroupTooSmall(f"odd-one-out needs K >= 2 clips, got {x.shape[1]}")
        _check_last_dim(x, self.cfg.feat_dim, "odd scorer")
        s = self.net(x).squeeze(-1)
        return s[0] if single else s


def final_step(features: torch.Tensor, lengths=None) -> torch.Tensor:
    """Last valid timestep of each sequence in (B, t, D)."""
    if lengths is None:
        return features[:, -1]
    idx = torch.as_tensor(lengths, dtype=torch.long) - 1
    return features[torch.arange(features.shape[0]), idx]


class _BGRU(nn.Module):
    def __init__(self, in_dim: int, hidden: int, layers: int):
        super().__init__()
        self.in_dim = in_dim
        self.gru = nn.GRU(in_dim, hidden, layers, batch_first=True, bidirectional=True)

    def _run(self, x, lengths):
        x, single = _batched(x, 3)
        _check_last_dim(x, self.in_dim, type(self).__name__)
        if lengths is not None:
            lengths_t = torch.as_tensor(lengths, dtype=torch.long).cpu()
            packed = pack_padded_sequence(x, lengths_t, batch_first=True, enforce_sorted=False)
            out, h = self.gru(packed)
            out, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True,
                                                       total_length=x.shape[1])
        else:
            out, h = self.gru(x)
        return out, h, single


class BGRUClassifier(_BGRU):
    """Bidirectional GRU; final forward/backward states -> linear -> class logits."""

    def __init__(self, in_dim: int, n_classes: int, hidden: int = 256, layers: int = 2):
        super().__init__(in_dim, hidden, layers)
        self.head = nn.Linear(2 * hidden, n_classes)

    def forward(self, x, lengths=None):
        _, h, single = self._run(x, lengths)
        last = torch.cat([h[-2], h[-1]], dim=-1)
        logits = self.head(last)
        return logits[0] if single else logits


class BGRURegressor(_BGRU):
    """Bidirectional GRU with a per-timestep scalar output."""

    def __init__(self, in_dim: int, hidden: int = 256, layers: int = 2):
        super().__init__(in_dim, hidden, layers)
        self.head = nn.Linear(2 * hidden, 1)

    def forward(self, x, lengths=None):
        out, _, single = self._run(x, lengths)
        y = self.head(out).squeeze(-1)
        return y[0] if single else y


class PretextModel(nn.Module):
    """All pretraining subnetworks under one parameter namespace."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.audio_encoder = AudioEncoder(cfg)
        self.identity_encoder = IdentityEncoder(cfg)
        self.noise_generator = NoiseGenerator(cfg)
        self.frame_decoder = FrameDecoder(cfg)
        self.odd_scorer = OddScorer(cfg)

    def generate_frames(self, still, audio, frame_index, generator=None):
        """Generate one frame per sample at ``frame_index`` (B,) given stills (B, 3, H, W)
        and log-mels (B, t, 80)."""
        z_aud = self.audio_encoder(audio)
        z_id, skips = self.identity_encoder(still)
        t_v = video_frames_for(z_aud.shape[1])
        z_n = self.noise_generator(t_v, batch=z_aud.shape[0], generator=generator)
        code = assemble_latent(z_aud, z_id, z_n)
        rows = code[torch.arange(code.shape[0]), torch.as_tensor(frame_index, dtype=torch.long)]
        return self.frame_decoder(rows, skips)

    def generate_video(self, still, audio, seed=0):
        """Full video (T_v, 3, H, W) for a single example."""
        z_aud = self.audio_encoder(audio)
        z_id, skips = self.identity_encoder(still)
        z_n = self.noise_generator(video_frames_for(z_aud.shape[0]), seed=seed)[0]
        return self.frame_decoder(assemble_latent(z_aud, z_id, z_n), skips)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_digest(module: nn.Module) -> str:
    """SHA-256 over all parameter bytes, in name order."""
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, model: nn.Module, config: dict, extra: dict | None = None):
    """Single-file ``.npz`` holding named little-endian float32 arrays and a JSON header."""
    arrays = {}
    for name, t in model.state_dict().items():
        if not torch.is_floating_point(t):
            continue
        arrays[name] = t.detach().cpu().numpy().astype("<f4")
    meta = {"format": CHECKPOINT_FORMAT, "config": config, "extra": extra or {},
            "names": sorted(arrays)}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        np.savez(f, **arrays)
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(meta, arrays)``; raises CheckpointError on anything malformed."""
    try:
        with np.load(str(path), allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
        meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    except Exception as e:  # noqa: BLE001 - any failure means a bad file
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {meta.get('format')!r}")
    return meta, arrays


def load_into(module: nn.Module, arrays: dict, prefix: str = ""):
    """Copy ``prefix``-named arrays into ``module``; every float tensor must be present."""
    state = module.state_dict()
    new_state = {}
    for name, t in state.items():
        key = prefix + name
        if not torch.is_floating_point(t):
            new_state[name] = t
            continue
        if key not in arrays:
            raise CheckpointError(f"checkpoint lacks parameter {key!r}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(t.shape):
            raise CheckpointError(f"{key}: shape {arr.shape} != expected {tuple(t.shape)}")
        new_state[name] = torch.from_numpy(np.array(arr, dtype=np.float32)).to(t.dtype)
    module.load_state_dict(new_state)
    return module


def load_audio_encoder(path) -> tuple[AudioEncoder, dict]:
    """Extract just the audio encoder from a pretraining checkpoint."""
    meta, arrays = read_checkpoint(path)
    try:
        cfg = ModelConfig.from_dict(meta["config"]["model"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: checkpoint has no model config") from e
    enc = load_into(AudioEncoder(cfg), arrays, prefix="audio_encoder.")
    enc.eval()
    return enc, meta
