"""Pretext objectives: odd-one-out grouping and loss, L1 frame reconstruction,
and the weighted audio-visual combination."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import AlignmentError, BatchTooSmall, InvalidWeight
from .models import final_step, video_frames_for
from .signal import JumbleSpec, jumble

DEFAULT_GROUP_SIZE = 4


@dataclass
class OddGroup:
    clips: list
    odd_index: int
    jumble_spec: JumbleSpec

    @property
    def k(self) -> int:
        return len(self.clips)


def build_odd_groups(batch, k: int = DEFAULT_GROUP_SIZE, seed=0) -> list[OddGroup]:
    """Split ``batch`` into groups of ``k`` and jumble one uniformly chosen clip per group.

    Trailing clips that do not fill a group are dropped.
    """
    if k < 2:
        raise ValueError("group size must be at least 2")
    if len(batch) < k:
        raise BatchTooSmall(f"batch of {len(batch)} cannot form a group of {k}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    groups = []
    for g in range(len(batch) // k):
        clips = list(batch[g * k:(g + 1) * k])
        odd = int(rng.integers(k))
        clips[odd], spec = jumble(clips[odd], seed=rng)
        groups.append(OddGroup(clips, odd, spec))
    return groups


def odd_cross_entropy(scores: torch.Tensor, odd_index) -> torch.Tensor:
    """Mean K-way cross-entropy of ``scores`` (G, K) against the odd positions."""
    target = torch.as_tensor(odd_index, dtype=torch.long)
    return F.cross_entropy(scores, target)


def _stack(clips, dtype):
    lengths = [c.shape[0] for c in clips]
    width = clips[0].shape[1]
    out = np.zeros((len(clips), max(lengths), width))
    for i, c in enumerate(clips):
        out[i, :c.shape[0]] = c
    return torch.as_tensor(out, dtype=dtype), lengths


def odd_group_scores(groups, encoder, scorer) -> torch.Tensor:
    """Scores (G, K), each clip summarised by its final-timestep encoder feature.

    Right padding is harmless because the encoder is causal.
    """
    dtype = next(encoder.parameters()).dtype
    k = groups[0].k
    clips = [c for g in groups for c in g.clips]
    x, lengths = _stack(clips, dtype)
    summary = final_step(encoder(x), lengths)
    return scorer(summary.view(len(groups), k, -1))


def odd_one_out_loss(groups, encoder, scorer) -> torch.Tensor:
    if not groups:
        raise ValueError("no odd-one-out groups")
    scores = odd_group_scores(groups, encoder, scorer)
    return odd_cross_entropy(scores, [g.odd_index for g in groups])


def odd_accuracy(groups, encoder, scorer) -> float:
    with torch.no_grad():
        scores = odd_group_scores(groups, encoder, scorer)
    pred = scores.argmax(dim=1).numpy()
    return float(np.mean(pred == np.array([g.odd_index for g in groups])))


@dataclass
class ReconBatch:
    still_frame: torch.Tensor        # (B, 3, H, W), video frame 0
    audio: torch.Tensor              # (B, t, 80)
    target_video: torch.Tensor       # (B, T_v, 3, H, W)
    sampled_frame_index: torch.Tensor  # (B,)

    def __post_init__(self):
        t_v = self.target_video.shape[1]
        if t_v < 1:
            raise ValueError("target video is empty")
        if video_frames_for(self.audio.shape[1]) != t_v:
            raise AlignmentError(f"{self.audio.shape[1]} audio frames do not align with "
                                 f"{t_v} video frames")
        idx = torch.as_tensor(self.sampled_frame_index)
        if torch.any(idx < 0) or torch.any(idx >= t_v):
            raise ValueError("sampled frame index outside the video")


def sample_frame_indices(batch: int, t_v: int, seed=0) -> torch.Tensor:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return torch.as_tensor(rng.integers(0, t_v, size=batch), dtype=torch.long)


def frame_l1(generated: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return (generated - target).abs().mean()


def l1_reconstruction_loss(batch: ReconBatch, model, seed=0) -> torch.Tensor:
    """Mean absolute pixel error between the generated and real frame at each
    sample's ``sampled_frame_index``."""
    gen = torch.Generator().manual_seed(int(seed)) if not isinstance(seed, torch.Generator) \
        else seed
    idx = torch.as_tensor(batch.sampled_frame_index, dtype=torch.long)
    fake = model.generate_frames(batch.still_frame, batch.audio, idx, generator=gen)
    real = batch.target_video[torch.arange(idx.shape[0]), idx]
    return frame_l1(fake, real)


def multitask_loss(l_video, l_audio, alpha: float):
    """``alpha * l_video + (1 - alpha) * l_audio``."""
    if not 0.0 <= alpha <= 1.0:
        raise InvalidWeight(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * l_video + (1.0 - alpha) * l_audio
