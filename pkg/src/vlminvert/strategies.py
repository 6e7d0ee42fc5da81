"""The four inversion loops: token-stepped, per-token-convergent, sequence-averaged,
and adaptive-weighted sequence descent.

All four share one step primitive: a teacher-forced forward over every answer
position, a weighted aggregation of per-token losses, and a plain gradient
update of the latent (``w <- w - update_rate * dL/dw``). They differ only in
the update schedule and the weight vector:

* ``tmi``    — one update per token per sweep, ``floor(steps/m)`` sweeps,
* ``tmi-c``  — ``floor(steps/m)`` consecutive updates per token, tokens in order,
* ``smi``    — uniform weights ``1/m``, ``steps`` updates,
* ``smi-aw`` — confidence-adaptive weights, ``steps`` updates.

The sequence strategies share one aggregation code path (index-ordered
weighted sum), so an adaptive step whose weights collapse to uniform is
bitwise identical to a plain sequence step.
"""

from __future__ import annotations

import io
import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .core import (
    AttackConfig,
    ConfigurationError,
    ContractViolationError,
    DTYPE,
    Generator,
    LatentVector,
    NumericError,
    TargetModel,
    TokenSequence,
    derive_seed,
    generate_text,
)
from .losses import RegAnchor, token_reports
from .runio import atomic_write_text

log = logging.getLogger("vlminvert")


@dataclass(frozen=True)
class StepRecord:
    """One inversion step.

    Losses, probabilities and weights describe the state the update was
    computed from; ``match`` reports whether the greedy decode of the state
    *after* the update contains the target answer. ``phase_token`` is the
    1-based active token for the token strategies, ``None`` for sequence
    strategies; ``alpha`` is recorded for sequence strategies only.
    """

    step: int
    phase_sweep: int
    phase_token: int | None
    token_losses: tuple[float, ...]
    probabilities: tuple[float, ...]
    alpha: tuple[float, ...] | None
    aggregate: float
    grad_norm: float
    match: bool


@dataclass
class InversionResult:
    """Final latent/image plus the full per-step trace of one inversion run."""

    strategy: str
    loss: str
    initial_latent: LatentVector
    latent: LatentVector
    image: torch.Tensor
    records: list[StepRecord]
    config: AttackConfig
    total_updates: int
    answer_text: str
    target_id: int | None = None

    @property
    def final_match(self) -> bool:
        return self.records[-1].match if self.records else False


def adaptive_weights(probs, confidence_threshold: float) -> np.ndarray:
    """Confidence-adaptive token weights.

    Tokens whose probability falls below the threshold share weight ``1/n``
    (``n`` = their count); confident tokens get 0. With no low-confidence
    tokens every weight is ``1/m``. The weights always sum to 1.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.shape[0] < 1:
        raise ContractViolationError("probabilities must be a non-empty vector")
    if not 0 < confidence_threshold <= 1:
        raise ConfigurationError("confidence_threshold must be in (0, 1]")
    low = probs < confidence_threshold
    n = int(low.sum())
    if n == 0:
        return np.full(probs.shape[0], 1.0 / probs.shape[0])
    weights = np.zeros(probs.shape[0])
    weights[low] = 1.0 / n
    return weights


def steps_per_token(total_steps: int, m: int) -> int:
    """Per-token sweep count for the token strategies: ``floor(total_steps / m)``."""
    if m < 1:
        raise ConfigurationError("answer length must be >= 1")
    if total_steps < m:
        raise ConfigurationError(
            f"token budget below one step per token: steps={total_steps} < m={m}"
        )
    return total_steps // m


def _init_latent(generator: Generator, config: AttackConfig, w0) -> LatentVector:
    if w0 is None:
        seed = derive_seed(config.seed, "latent-init")
        return LatentVector(generator.sample_prior(1, seed)[0], seed)
    if isinstance(w0, LatentVector):
        return LatentVector(w0.values.detach().clone(), w0.rng_seed)
    return LatentVector(torch.as_tensor(w0, dtype=DTYPE).detach().clone(), -1)


def _free_running_probs(model: TargetModel, prompt: TokenSequence,
                        image: torch.Tensor, answer: TokenSequence) -> tuple[float, ...]:
    """P(y_i) under the model's own greedy prefix instead of the forced one.

    The greedy decode is truncated/padded with the end token to the answer
    length; only the weight rule consumes these probabilities.
    """
    m = len(answer)
    vocab = model.vocabulary
    pred = generate_text(model, prompt, image, max_len=m)
    padded = (pred.ids + (vocab.eos_id,) * m)[:m]
    with torch.no_grad():
        logits, _ = model.answer_scores(prompt, image.unsqueeze(0),
                                        TokenSequence(tuple(padded), vocab))
        lse = torch.logsumexp(logits[0], dim=-1)
        target = torch.tensor(answer.ids)
        probs = torch.exp(logits[0][torch.arange(m), target] - lse)
    return tuple(float(p) for p in probs)


def _schedule(strategy: str, total_steps: int, m: int) -> list[tuple[int, int | None]]:
    if strategy == "tmi":
        sweeps = steps_per_token(total_steps, m)
        plan = [(k, i) for k in range(1, sweeps + 1) for i in range(1, m + 1)]
    elif strategy == "tmi-c":
        sweeps = steps_per_token(total_steps, m)
        plan = [(k, i) for i in range(1, m + 1) for k in range(1, sweeps + 1)]
    elif strategy in ("smi", "smi-aw"):
        plan = [(k, None) for k in range(1, total_steps + 1)]
    else:
        raise ConfigurationError(f"unknown strategy: {strategy!r}")
    if strategy in ("tmi", "tmi-c") and total_steps % m:
        log.debug("token schedule drops %d remainder step(s) of the budget %d",
                  total_steps % m, total_steps)
    return plan


def _run(strategy: str, model: TargetModel, generator: Generator,
         prompt: TokenSequence, answer: TokenSequence, config: AttackConfig,
         w0=None, anchor: RegAnchor | None = None,
         target_id: int | None = None) -> InversionResult:
    m = len(answer)
    if m < 1:
        raise ContractViolationError("target answer must be non-empty")
    init = _init_latent(generator, config, w0)
    if init.values.shape[0] != generator.latent_dim:
        raise ContractViolationError(
            f"initial latent dimension {init.values.shape[0]} does not match "
            f"generator latent_dim {generator.latent_dim}"
        )
    plan = _schedule(strategy, config.steps, m)
    max_decode = max(config.max_decode_len, m + 2)

    resample_rng = None
    if config.anchor_mode == "resample":
        if anchor is None:
            raise ConfigurationError("anchor_mode='resample' requires an anchor")
        resample_rng = torch.Generator().manual_seed(
            derive_seed(config.seed, "anchor-resample", init.rng_seed))

    adam = None
    if config.optimizer == "adam":
        adam_param = init.values.detach().clone().requires_grad_(True)
        adam = torch.optim.Adam([adam_param], lr=config.update_rate)
        log.info("optimizer hook active: adam replaces the plain gradient update")

    w = init.values.detach().clone()
    records: list[StepRecord] = []
    updates = 0

    for step_no, (sweep, active_token) in enumerate(plan, start=1):
        if adam is not None:
            leaf = adam_param
        else:
            leaf = w.detach().requires_grad_(True)

        image = generator.decode(leaf.unsqueeze(0))
        logits, penultimate = model.answer_scores(prompt, image, answer)
        f_reg = anchor.sample(resample_rng) if resample_rng is not None else None
        try:
            reports = token_reports(logits[0], penultimate[0], answer, config.loss,
                                    anchor=anchor, reg_weight=config.reg_weight,
                                    f_reg=f_reg)
        except NumericError as err:
            raise NumericError(f"step {step_no}: {err}") from err

        teacher_probs = tuple(r.probability for r in reports)
        alpha_record: tuple[float, ...] | None = None
        if active_token is not None:
            aggregate = reports[active_token - 1].loss
            recorded_probs = teacher_probs
        else:
            if strategy == "smi-aw":
                if config.confidence_source == "free_running":
                    conf = _free_running_probs(model, prompt, image[0].detach(), answer)
                else:
                    conf = teacher_probs
                weights = adaptive_weights(conf, config.confidence_threshold)
                recorded_probs = conf
            else:
                weights = np.full(m, 1.0 / m)
                recorded_probs = teacher_probs
            alpha_record = tuple(float(a) for a in weights)
            aggregate = reports[0].loss * float(weights[0])
            for rep, weight in zip(reports[1:], weights[1:]):
                aggregate = aggregate + rep.loss * float(weight)

        (grad,) = torch.autograd.grad(aggregate, leaf)
        grad_norm = float(torch.linalg.vector_norm(grad))
        partial = StepRecord(
            step=step_no, phase_sweep=sweep, phase_token=active_token,
            token_losses=tuple(float(r.loss) for r in reports),
            probabilities=recorded_probs, alpha=alpha_record,
            aggregate=float(aggregate), grad_norm=grad_norm, match=False,
        )
        if not (torch.isfinite(grad).all() and np.isfinite(partial.aggregate)):
            raise NumericError(
                f"non-finite gradient or loss at step {step_no}; aborting the run",
                step_record=partial,
            )

        if adam is not None:
            adam.zero_grad()
            adam_param.grad = grad
            adam.step()
            w = adam_param.detach().clone()
        else:
            w = leaf.detach() - config.update_rate * grad
        updates += 1

        with torch.no_grad():
            new_image = generator.decode(w.unsqueeze(0))[0]
        decoded = generate_text(model, prompt, new_image, max_len=max_decode)
        records.append(StepRecord(
            step=partial.step, phase_sweep=partial.phase_sweep,
            phase_token=partial.phase_token, token_losses=partial.token_losses,
            probabilities=partial.probabilities, alpha=partial.alpha,
            aggregate=partial.aggregate, grad_norm=partial.grad_norm,
            match=answer.text in decoded.text,
        ))

    with torch.no_grad():
        final_image = generator.decode(w.unsqueeze(0))[0]
    return InversionResult(
        strategy=strategy, loss=config.loss,
        initial_latent=init, latent=LatentVector(w, init.rng_seed),
        image=final_image, records=records, config=config,
        total_updates=updates, answer_text=answer.text, target_id=target_id,
    )


def run_tmi(model, generator, prompt, answer, config, w0=None, anchor=None,
            target_id=None) -> InversionResult:
    """One update per token per sweep, cycling through the answer."""
    return _run("tmi", model, generator, prompt, answer, config, w0, anchor, target_id)


def run_tmi_c(model, generator, prompt, answer, config, w0=None, anchor=None,
              target_id=None) -> InversionResult:
    """All of a token's updates before advancing to the next token."""
    return _run("tmi-c", model, generator, prompt, answer, config, w0, anchor, target_id)


def run_smi(model, generator, prompt, answer, config, w0=None, anchor=None,
            target_id=None) -> InversionResult:
    """One update per step on the token-averaged sequence loss."""
    return _run("smi", model, generator, prompt, answer, config, w0, anchor, target_id)


def run_smi_aw(model, generator, prompt, answer, config, w0=None, anchor=None,
               target_id=None) -> InversionResult:
    """Sequence descent with confidence-adaptive token weights."""
    return _run("smi-aw", model, generator, prompt, answer, config, w0, anchor, target_id)


_RUNNERS = {"tmi": run_tmi, "tmi-c": run_tmi_c, "smi": run_smi, "smi-aw": run_smi_aw}


def run_strategy(strategy: str, model, generator, prompt, answer, config,
                 w0=None, anchor=None, target_id=None) -> InversionResult:
    if strategy not in _RUNNERS:
        raise ConfigurationError(f"unknown strategy: {strategy!r}")
    return _RUNNERS[strategy](model, generator, prompt, answer, config,
                              w0=w0, anchor=anchor, target_id=target_id)


def trace_csv(result: InversionResult) -> str:
    """Render the per-step trace as CSV; floats use shortest round-trip repr."""
    m = len(result.records[0].token_losses) if result.records else 0
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["step", "sweep", "token"]
        + [f"loss_{i}" for i in range(m)]
        + [f"prob_{i}" for i in range(m)]
        + [f"alpha_{i}" for i in range(m)]
        + ["aggregate", "grad_norm", "match"]
    )
    for rec in result.records:
        alpha = ["" for _ in range(m)] if rec.alpha is None else [repr(a) for a in rec.alpha]
        writer.writerow(
            [rec.step, rec.phase_sweep, "" if rec.phase_token is None else rec.phase_token]
            + [repr(v) for v in rec.token_losses]
            + [repr(p) for p in rec.probabilities]
            + alpha
            + [repr(rec.aggregate), repr(rec.grad_norm), int(rec.match)]
        )
    return buf.getvalue()


def write_trace(path, result: InversionResult) -> None:
    atomic_write_text(path, trace_csv(result))


def read_trace(path) -> list[StepRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    m = sum(1 for col in header if col.startswith("loss_"))
    records = []
    for row in body:
        token = None if row[2] == "" else int(row[2])
        losses = tuple(float(v) for v in row[3 : 3 + m])
        probs = tuple(float(v) for v in row[3 + m : 3 + 2 * m])
        alpha_cells = row[3 + 2 * m : 3 + 3 * m]
        alpha = None if alpha_cells and alpha_cells[0] == "" else tuple(float(v) for v in alpha_cells)
        records.append(StepRecord(
            step=int(row[0]), phase_sweep=int(row[1]), phase_token=token,
            token_losses=losses, probabilities=probs, alpha=alpha,
            aggregate=float(row[3 + 3 * m]), grad_norm=float(row[4 + 3 * m]),
            match=bool(int(row[5 + 3 * m])),
        ))
    return records
