import dataclasses

import numpy as np
import torch

from avssl.models import ModelConfig


def tiny_config(**overrides) -> ModelConfig:
    """Shrunken widths for float64 finite-difference checks."""
    cfg = ModelConfig(n_mels=6, enc_hidden=4, enc_layers=2, feat_dim=5, id_dim=3, noise_dim=2,
                      id_channels=(2, 2, 2, 2, 2, 2), frame_hw=(64, 128), scorer_hidden=3,
                      down_hidden=3, down_layers=2)
    return dataclasses.replace(cfg, **overrides)


def fd_relative_error(loss_fn, params, eps=1e-6, max_coords=60, seed=0):
    """Compare autograd gradients of ``loss_fn()`` with central differences.

    Probes up to ``max_coords`` random coordinates per tensor; returns
    ||g_auto - g_fd|| / max(||g_auto||, ||g_fd||).
    """
    rng = np.random.default_rng(seed)
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    auto, numeric = [], []
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.view(-1)
            g = torch.zeros_like(p) if g is None else g
            coords = rng.choice(flat.numel(), size=min(max_coords, flat.numel()), replace=False)
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                numeric.append((up - down) / (2 * eps))
                auto.append(g.view(-1)[i].item())
    auto, numeric = np.array(auto), np.array(numeric)
    scale = max(np.linalg.norm(auto), np.linalg.norm(numeric), 1e-300)
    return np.linalg.norm(auto - numeric) / scale
