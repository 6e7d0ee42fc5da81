"""Candidate selection: loss-ranked latent pools before the attack, augmentation-ranked
reconstructions after it.

Both stages score with the configured attack loss in its sequence form
(token-averaged, no updates). Augmentation randomness is keyed by candidate
identity, not list position, so final selection is permutation invariant.
"""

from __future__ import annotations

import logging
import math

import numpy as np
import torch
import torch.nn.functional as F

from .core import (
    AttackConfig,
    ConfigurationError,
    DTYPE,
    Generator,
    LatentVector,
    TargetModel,
    TokenSequence,
    derive_seed,
)
from .losses import RegAnchor, sequence_loss_batch
from .strategies import InversionResult

log = logging.getLogger("vlminvert")

_SCORE_CHUNK = 128


def score_latents(model: TargetModel, generator: Generator, prompt: TokenSequence,
                  answer: TokenSequence, latents: torch.Tensor, loss_name: str,
                  anchor: RegAnchor | None = None, reg_weight: float = 1.0) -> np.ndarray:
    """Sequence loss of each latent's decoded image, chunked, no gradients."""
    losses = []
    with torch.no_grad():
        for start in range(0, latents.shape[0], _SCORE_CHUNK):
            images = generator.decode(latents[start : start + _SCORE_CHUNK])
            logits, penultimate = model.answer_scores(prompt, images, answer)
            losses.append(sequence_loss_batch(logits, penultimate, answer,
                                              loss_name, anchor, reg_weight))
    return torch.cat(losses).numpy()


def initial_select(model: TargetModel, generator: Generator, prompt: TokenSequence,
                   answer: TokenSequence, loss_name: str, pool_size: int = 2000,
                   n: int = 16, seed: int = 0, anchor: RegAnchor | None = None,
                   reg_weight: float = 1.0) -> tuple[list[LatentVector], dict]:
    """Sample a latent pool from the generator prior and keep the n lowest-loss latents.

    Returns the selected latents in ascending loss order plus a pool report
    (selection statistics for persistence).
    """
    if n < 1 or pool_size < n:
        raise ConfigurationError(f"need pool_size >= n >= 1, got pool_size={pool_size} n={n}")
    pool = generator.sample_prior(pool_size, derive_seed(seed, "candidate-pool"))
    losses = score_latents(model, generator, prompt, answer, pool, loss_name,
                           anchor, reg_weight)
    order = np.argsort(losses, kind="stable")[:n]
    selected = [
        LatentVector(pool[int(idx)].clone(), derive_seed(seed, "pool-item", int(idx)))
        for idx in order
    ]
    report = {
        "pool_size": int(pool_size),
        "n_selected": int(n),
        "pool_loss_min": float(losses.min()),
        "pool_loss_median": float(np.median(losses)),
        "pool_loss_max": float(losses.max()),
        "selected_pool_indices": [int(i) for i in order],
        "selected_losses": [float(losses[i]) for i in order],
    }
    return selected, report


def default_augment(image: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Horizontal flip, small crop-resize and color jitter; output clamped to [0, 1]."""
    out = image
    if rng.random() < 0.5:
        out = torch.flip(out, dims=[2])
    size = out.shape[-1]
    crop = int(rng.integers(math.ceil(0.85 * size), size + 1))
    if crop < size:
        top = int(rng.integers(0, size - crop + 1))
        left = int(rng.integers(0, size - crop + 1))
        cropped = out[:, top : top + crop, left : left + crop]
        out = F.interpolate(cropped.unsqueeze(0), size=(size, size), mode="bilinear",
                            align_corners=False)[0]
    scale = torch.as_tensor(rng.uniform(0.9, 1.1, size=(3, 1, 1)), dtype=DTYPE)
    shift = torch.as_tensor(rng.uniform(-0.05, 0.05, size=(3, 1, 1)), dtype=DTYPE)
    return (out * scale + shift).clamp(0.0, 1.0)


def final_select(model: TargetModel, candidates: list[InversionResult],
                 prompt: TokenSequence, answer: TokenSequence,
                 n_augmentations: int = 10, seed: int = 0,
                 anchor: RegAnchor | None = None,
                 augment_fn=default_augment) -> tuple[list[InversionResult], dict]:
    """Keep the ceil(n/2) candidates with the lowest mean loss under random augmentations.

    Augmentation draws are seeded per (candidate identity, augmentation
    index); exact ties rank by candidate identity so input order never
    matters.
    """
    if not candidates:
        raise ConfigurationError("final selection needs at least one candidate")
    if n_augmentations < 1:
        raise ConfigurationError("n_augmentations must be >= 1")

    config: AttackConfig = candidates[0].config
    scored = []
    with torch.no_grad():
        for cand in candidates:
            key = cand.latent.rng_seed
            views = torch.stack([
                augment_fn(cand.image,
                           np.random.default_rng(derive_seed(seed, "augment", key, j)))
                for j in range(n_augmentations)
            ])
            logits, penultimate = model.answer_scores(prompt, views, answer)
            losses = sequence_loss_batch(logits, penultimate, answer, config.loss,
                                         anchor, config.reg_weight)
            scored.append((float(losses.mean()), key, cand))

    scored.sort(key=lambda item: (item[0], item[1]))
    keep = (len(candidates) + 1) // 2
    report = {
        "n_candidates": len(candidates),
        "n_kept": keep,
        "n_augmentations": int(n_augmentations),
        "mean_augmented_losses": {str(key): loss for loss, key, _ in scored},
        "kept_candidate_ids": [key for _, key, _ in scored[:keep]],
    }
    return [cand for _, _, cand in scored[:keep]], report
