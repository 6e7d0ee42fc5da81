"""Per-token identity losses and the public-statistics anchor for the logit-maximization loss.

All three losses read one next-token prediction (logits + penultimate
features) and a target token id, and return a graph-attached scalar inside a
:class:`TokenLossReport`. The cross-entropy and max-margin losses are
invariant under adding a constant to all logits; the logit-maximization loss
is not (its logit term is absolute).
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np
import torch

from .core import (
    DTYPE,
    ConfigurationError,
    ContractViolationError,
    ModelStep,
    NumericError,
    TargetModel,
    TokenSequence,
    derive_seed,
)

log = logging.getLogger("vlminvert")

_ANCHOR_CHUNK = 64


@dataclass(frozen=True)
class TokenLossReport:
    """Loss value plus the diagnostics recorded in inversion traces.

    ``loss`` stays attached to the autograd graph; the float fields are
    detached snapshots. ``probability`` is the softmax of the step's own
    logits at the target id.
    """

    loss: torch.Tensor
    probability: float
    target_logit: float
    runner_up_logit: float
    token_index: int


@dataclass(frozen=True)
class RegAnchor:
    """Mean/variance of penultimate activations over public (prompt, image) pairs.

    The mean anchors the logit-maximization regularizer; the variance is kept
    for diagnostics and the flag-gated resampling variant.
    """

    mean: torch.Tensor
    variance: torch.Tensor
    count: int
    model_hash: str
    prompt: str
    seed: int

    def sample(self, rng: torch.Generator) -> torch.Tensor:
        """Draw one activation from N(mean, variance) for the resampling variant."""
        eps = torch.randn(self.mean.shape[0], generator=rng, dtype=DTYPE)
        return self.mean + self.variance.sqrt() * eps


def _check_step(step: ModelStep, token_index: int) -> None:
    if not torch.isfinite(step.logits).all():
        raise NumericError(f"non-finite logits at token index {token_index}")


def _probability(logits: torch.Tensor, target_id: int) -> float:
    lse = torch.logsumexp(logits.detach(), dim=-1)
    return float(torch.exp(logits.detach()[target_id] - lse))


def _runner_up_index(logits: torch.Tensor, target_id: int) -> int:
    # Lowest index wins exact ties: np.argmax returns the first occurrence.
    masked = logits.detach().numpy().copy()
    masked[target_id] = -np.inf
    return int(np.argmax(masked))


def ce_loss(step: ModelStep, target_id: int, token_index: int = 0) -> TokenLossReport:
    """Negative log-likelihood of the target token, log-sum-exp stabilized."""
    _check_step(step, token_index)
    if not 0 <= target_id < step.logits.shape[-1]:
        raise ContractViolationError(f"target id {target_id} outside the logit range")
    loss = torch.logsumexp(step.logits, dim=-1) - step.logits[target_id]
    return TokenLossReport(
        loss=loss,
        probability=_probability(step.logits, target_id),
        target_logit=float(step.logits[target_id]),
        runner_up_logit=float(step.logits[_runner_up_index(step.logits, target_id)]),
        token_index=token_index,
    )


def mml_loss(step: ModelStep, target_id: int, token_index: int = 0) -> TokenLossReport:
    """Max-margin loss: highest incorrect logit minus the target logit.

    Gradient flows to the target logit and to the single maximizing incorrect
    logit (lowest index on exact ties).
    """
    _check_step(step, token_index)
    if step.logits.shape[-1] < 2:
        raise ContractViolationError("max-margin loss needs a vocabulary of size >= 2")
    if not 0 <= target_id < step.logits.shape[-1]:
        raise ContractViolationError(f"target id {target_id} outside the logit range")
    k = _runner_up_index(step.logits, target_id)
    loss = -step.logits[target_id] + step.logits[k]
    return TokenLossReport(
        loss=loss,
        probability=_probability(step.logits, target_id),
        target_logit=float(step.logits[target_id]),
        runner_up_logit=float(step.logits[k]),
        token_index=token_index,
    )


def lom_loss(step: ModelStep, target_id: int, anchor: RegAnchor,
             reg_weight: float = 1.0, token_index: int = 0,
             f_reg: torch.Tensor | None = None) -> TokenLossReport:
    """Logit maximization with a penalty toward the public activation anchor.

    ``f_reg`` defaults to the anchor mean; the resampling variant passes a
    drawn activation instead.
    """
    _check_step(step, token_index)
    if not 0 <= target_id < step.logits.shape[-1]:
        raise ContractViolationError(f"target id {target_id} outside the logit range")
    reference = anchor.mean if f_reg is None else f_reg
    if reference.shape != step.penultimate.shape:
        raise ContractViolationError(
            f"anchor dimension {tuple(reference.shape)} does not match penultimate "
            f"{tuple(step.penultimate.shape)}"
        )
    loss = -step.logits[target_id] + reg_weight * ((step.penultimate - reference) ** 2).sum()
    return TokenLossReport(
        loss=loss,
        probability=_probability(step.logits, target_id),
        target_logit=float(step.logits[target_id]),
        runner_up_logit=float(step.logits[_runner_up_index(step.logits, target_id)]),
        token_index=token_index,
    )


def token_reports(logits: torch.Tensor, penultimate: torch.Tensor,
                  answer: TokenSequence, loss_name: str,
                  anchor: RegAnchor | None = None, reg_weight: float = 1.0,
                  f_reg: torch.Tensor | None = None) -> list[TokenLossReport]:
    """Per-token reports for one teacher-forced forward, ``logits`` of shape (m, vocab)."""
    reports = []
    for i, target_id in enumerate(answer.ids):
        step = ModelStep(logits=logits[i], penultimate=penultimate[i])
        if loss_name == "ce":
            reports.append(ce_loss(step, target_id, token_index=i))
        elif loss_name == "mml":
            reports.append(mml_loss(step, target_id, token_index=i))
        elif loss_name == "lom":
            if anchor is None:
                raise ConfigurationError("the logit-maximization loss requires an anchor")
            reports.append(lom_loss(step, target_id, anchor, reg_weight,
                                    token_index=i, f_reg=f_reg))
        else:
            raise ConfigurationError(f"unknown loss: {loss_name!r}")
    return reports


def sequence_loss_batch(logits: torch.Tensor, penultimate: torch.Tensor,
                        answer: TokenSequence, loss_name: str,
                        anchor: RegAnchor | None = None,
                        reg_weight: float = 1.0) -> torch.Tensor:
    """Token-averaged sequence loss for a batch, ``logits`` of shape (B, m, vocab).

    Vectorized scoring path for candidate pools; agrees with the per-token
    report path to float64 rounding (asserted in the test suite).
    """
    target = torch.tensor(answer.ids, dtype=torch.long)
    tgt_logits = logits.gather(-1, target.view(1, -1, 1).expand(logits.shape[0], -1, 1)).squeeze(-1)
    if loss_name == "ce":
        per_token = torch.logsumexp(logits, dim=-1) - tgt_logits
    elif loss_name == "mml":
        masked = logits.clone()
        masked.scatter_(-1, target.view(1, -1, 1).expand(logits.shape[0], -1, 1), float("-inf"))
        per_token = -tgt_logits + masked.max(dim=-1).values
    elif loss_name == "lom":
        if anchor is None:
            raise ConfigurationError("the logit-maximization loss requires an anchor")
        penalty = ((penultimate - anchor.mean) ** 2).sum(-1)
        per_token = -tgt_logits + reg_weight * penalty
    else:
        raise ConfigurationError(f"unknown loss: {loss_name!r}")
    return per_token.mean(dim=-1)


def model_parameter_hash(model: torch.nn.Module) -> str:
    """Stable content hash of a model's parameters and buffers."""
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().to(DTYPE).numpy().tobytes()
                      if tensor.is_floating_point()
                      else tensor.detach().numpy().tobytes())
    return digest.hexdigest()


def first_position_features(model: TargetModel, prompt: TokenSequence,
                            images: torch.Tensor) -> torch.Tensor:
    """Penultimate features at the first answer position (empty prefix), batched.

    Causality makes the first answer position independent of any answer
    token, so a one-token placeholder answer drives the batched path.
    """
    placeholder = TokenSequence((model.vocabulary.eos_id,), model.vocabulary)
    _, penultimate = model.answer_scores(prompt, images, placeholder)
    return penultimate[:, 0, :]


def estimate_reg_anchor(model: TargetModel, prompt: TokenSequence,
                        images: torch.Tensor, count: int = 2000,
                        seed: int = 0, model_hash: str = "") -> RegAnchor:
    """Mean/variance of first-position penultimate features over public images.

    Draws ``count`` images without replacement (seeded); if fewer are
    available it proceeds with all of them and records the actual count
    rather than fabricating samples. Variance uses the population convention.
    """
    if count < 1:
        raise ConfigurationError("anchor estimation needs count >= 1")
    available = images.shape[0]
    if available < 1:
        raise ConfigurationError("anchor estimation needs at least one public image")
    if count > available:
        log.warning("anchor requested %d pairs but only %d public images are "
                    "available; proceeding with all of them", count, available)
        chosen = torch.arange(available)
    elif count == available:
        chosen = torch.arange(available)
    else:
        rng = torch.Generator().manual_seed(derive_seed(seed, "anchor-subset"))
        chosen = torch.randperm(available, generator=rng)[:count].sort().values

    feats = []
    with torch.no_grad():
        for start in range(0, chosen.shape[0], _ANCHOR_CHUNK):
            batch = images[chosen[start : start + _ANCHOR_CHUNK]]
            feats.append(first_position_features(model, prompt, batch))
    stacked = torch.cat(feats, dim=0)
    return RegAnchor(
        mean=stacked.mean(dim=0),
        variance=stacked.var(dim=0, unbiased=False),
        count=int(stacked.shape[0]),
        model_hash=model_hash,
        prompt=prompt.text,
        seed=seed,
    )


def save_anchor(path, anchor: RegAnchor) -> None:
    torch.save({
        "kind": "reg_anchor",
        "mean": anchor.mean,
        "variance": anchor.variance,
        "count": anchor.count,
        "model_hash": anchor.model_hash,
        "prompt": anchor.prompt,
        "seed": anchor.seed,
    }, path)


def load_anchor(path) -> RegAnchor:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "reg_anchor":
        raise ContractViolationError(f"file at {path} is not a persisted anchor")
    return RegAnchor(payload["mean"], payload["variance"], payload["count"],
                     payload["model_hash"], payload["prompt"], payload["seed"])
