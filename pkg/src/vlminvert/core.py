"""Domain types and the contracts every target model and generator must satisfy.

Conventions used throughout the toolkit:

* images are ``torch.Tensor`` of shape ``(channels, height, width)`` with
  values in ``[0, 1]``,
* latents are 1-D ``torch.Tensor`` of the generator's latent dimension,
* all tensors are ``torch.float64`` (``DTYPE``); attacks, training and
  evaluation share one dtype so gradient checks and replay are exact.
"""

from __future__ import annotations

import hashlib
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import torch

DTYPE = torch.float64

STRATEGIES = ("tmi", "tmi-c", "smi", "smi-aw")
LOSSES = ("ce", "mml", "lom")


class ContractViolationError(ValueError):
    """An input broke a model/generator contract (shape, dimension, vocabulary)."""


class ConfigurationError(ValueError):
    """A configuration value is outside its documented domain."""


class NumericError(RuntimeError):
    """Non-finite values surfaced mid-run; carries the offending step record."""

    def __init__(self, message, step_record=None):
        super().__init__(message)
        self.step_record = step_record


def derive_seed(master_seed: int, *components) -> int:
    """Per-component seed derivation rule.

    Every source of randomness in the toolkit draws its seed as
    ``sha256("<master_seed>/<component>/<component>/...")`` reduced to 63 bits,
    so one master seed makes a whole run replayable while components stay
    statistically independent.
    """
    text = "/".join([str(master_seed)] + [str(c) for c in components])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & (2**63 - 1)


@dataclass(frozen=True)
class Vocabulary:
    """Token id space shared by prompts, answers and model logits.

    Ids are dense in ``[0, size)``; ids 0..2 are the pad/begin/end specials.
    """

    tokens: tuple[str, ...]
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ContractViolationError("vocabulary tokens must be unique")
        object.__setattr__(
            self, "_index", {tok: i for i, tok in enumerate(self.tokens)}
        )

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def special_ids(self) -> tuple[int, int, int]:
        return (self.pad_id, self.bos_id, self.eos_id)

    def id_to_text(self, token_id: int) -> str:
        return self.tokens[token_id]

    def encode(self, text: str) -> "TokenSequence":
        """Whitespace tokenization; raises on out-of-vocabulary words."""
        ids = []
        for word in text.split():
            if word not in self._index:
                raise ContractViolationError(f"word not in vocabulary: {word!r}")
            ids.append(self._index[word])
        return TokenSequence(tuple(ids), self)

    def decode(self, ids: Iterable[int]) -> str:
        """Inverse of :meth:`encode`; special tokens are dropped."""
        specials = set(self.special_ids)
        return " ".join(self.tokens[i] for i in ids if i not in specials)


@dataclass(frozen=True)
class TokenSequence:
    """An ordered list of token ids bound to its vocabulary."""

    ids: tuple[int, ...]
    vocabulary: Vocabulary

    def __post_init__(self):
        for i in self.ids:
            if not 0 <= i < self.vocabulary.size:
                raise ContractViolationError(f"token id {i} outside vocabulary")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def text(self) -> str:
        return self.vocabulary.decode(self.ids)

    def prefix(self, length: int) -> "TokenSequence":
        return TokenSequence(self.ids[:length], self.vocabulary)


@dataclass(frozen=True)
class LatentVector:
    """A generator input plus the seed provenance it was drawn from."""

    values: torch.Tensor
    rng_seed: int

    def __post_init__(self):
        if self.values.ndim != 1:
            raise ContractViolationError("latent must be a 1-D vector")
        if not torch.isfinite(self.values).all():
            raise ContractViolationError("latent has non-finite entries")


@dataclass(frozen=True)
class ModelStep:
    """One next-token prediction: full-vocabulary logits plus penultimate features."""

    logits: torch.Tensor
    penultimate: torch.Tensor


@dataclass(frozen=True)
class AttackConfig:
    """Hyperparameters of one inversion run.

    ``steps`` is the total update budget; token-based strategies split it into
    ``floor(steps / m)`` sweeps per token. ``confidence_threshold`` feeds the
    adaptive weighting rule, ``reg_weight`` the logit-maximization regularizer.
    """

    strategy: str = "smi-aw"
    loss: str = "lom"
    steps: int = 70
    update_rate: float = 0.05
    confidence_threshold: float = 0.999
    reg_weight: float = 1.0
    pool_size: int = 2000
    n_candidates: int = 16
    n_augmentations: int = 10
    seed: int = 0
    max_decode_len: int = 8
    optimizer: str = "sgd"
    confidence_source: str = "teacher_forced"
    anchor_mode: str = "mean"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy: {self.strategy!r}")
        if self.loss not in LOSSES:
            raise ConfigurationError(f"unknown loss: {self.loss!r}")
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.update_rate < 0:
            raise ConfigurationError("update_rate must be >= 0")
        if not 0 < self.confidence_threshold <= 1:
            raise ConfigurationError("confidence_threshold must be in (0, 1]")
        if self.reg_weight < 0:
            raise ConfigurationError("reg_weight must be >= 0")
        if self.n_candidates < 1 or self.pool_size < self.n_candidates:
            raise ConfigurationError("need pool_size >= n_candidates >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer: {self.optimizer!r}")
        if self.confidence_source not in ("teacher_forced", "free_running"):
            raise ConfigurationError(
                f"unknown confidence_source: {self.confidence_source!r}"
            )
        if self.anchor_mode not in ("mean", "resample"):
            raise ConfigurationError(f"unknown anchor_mode: {self.anchor_mode!r}")

    def with_overrides(self, **kwargs) -> "AttackConfig":
        return replace(self, **kwargs)


def validate_image(image: torch.Tensor, expected_shape=None) -> torch.Tensor:
    if image.ndim != 3:
        raise ContractViolationError(
            f"image must be (channels, height, width), got shape {tuple(image.shape)}"
        )
    if expected_shape is not None and tuple(image.shape) != tuple(expected_shape):
        raise ContractViolationError(
            f"image shape {tuple(image.shape)} does not match expected {tuple(expected_shape)}"
        )
    return image


class TargetModel(ABC):
    """White-box autoregressive target: (prompt, image, answer prefix) -> next-token logits.

    Implementations must be deterministic and differentiable with respect to
    the image (and, composed through a generator, the latent). Adapters for
    external pretrained models only need :meth:`step`; the batched
    teacher-forced path below has a generic fallback.
    """

    @property
    @abstractmethod
    def vocabulary(self) -> Vocabulary: ...

    @property
    @abstractmethod
    def penultimate_dim(self) -> int: ...

    @property
    @abstractmethod
    def image_shape(self) -> tuple[int, int, int]: ...

    @abstractmethod
    def step(
        self, prompt: TokenSequence, image: torch.Tensor, prefix: TokenSequence
    ) -> ModelStep:
        """Predict the token after ``prefix`` given the prompt and image."""

    def answer_scores(
        self, prompt: TokenSequence, images: torch.Tensor, answer: TokenSequence
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Teacher-forced logits/features at every answer position.

        ``images`` is ``(B, C, H, W)``; returns ``(B, m, vocab)`` logits and
        ``(B, m, penultimate_dim)`` features where row ``i`` conditions on the
        ground-truth prefix ``answer[:i]``. Generic fallback loops over
        :meth:`step`; concrete models may fuse this into one forward pass.
        """
        m = len(answer)
        batches_logits, batches_pen = [], []
        for b in range(images.shape[0]):
            logits_rows, pen_rows = [], []
            for i in range(m):
                step = self.step(prompt, images[b], answer.prefix(i))
                logits_rows.append(step.logits)
                pen_rows.append(step.penultimate)
            batches_logits.append(torch.stack(logits_rows))
            batches_pen.append(torch.stack(pen_rows))
        return torch.stack(batches_logits), torch.stack(batches_pen)


class Generator(ABC):
    """Image prior: maps a latent vector to an image with pixels in [0, 1]."""

    @property
    @abstractmethod
    def latent_dim(self) -> int: ...

    @property
    @abstractmethod
    def image_shape(self) -> tuple[int, int, int]: ...

    @abstractmethod
    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        """Map ``(B, latent_dim)`` latents to ``(B, C, H, W)`` images in [0, 1]."""

    def prior_parameters(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-coordinate (mean, std) of the sampling prior; standard normal by default."""
        mean = torch.zeros(self.latent_dim, dtype=DTYPE)
        std = torch.ones(self.latent_dim, dtype=DTYPE)
        return mean, std

    def sample_prior(self, count: int, seed: int) -> torch.Tensor:
        """Draw ``count`` latents from the prior, deterministically per seed."""
        mean, std = self.prior_parameters()
        rng = torch.Generator().manual_seed(seed & (2**63 - 1))
        eps = torch.randn(count, self.latent_dim, generator=rng, dtype=DTYPE)
        return mean + std * eps


def target_step(
    model: TargetModel,
    prompt: TokenSequence,
    image: torch.Tensor,
    prefix: TokenSequence,
) -> ModelStep:
    """Contract entry point for a single next-token prediction."""
    validate_image(image, model.image_shape)
    return model.step(prompt, image, prefix)


def generate_text(
    model: TargetModel,
    prompt: TokenSequence,
    image: torch.Tensor,
    max_len: int,
) -> TokenSequence:
    """Greedy argmax decoding until the end token or ``max_len`` tokens.

    Ties resolve to the lowest logit index. The returned sequence excludes
    the end token.
    """
    if max_len < 1:
        raise ConfigurationError("max_len must be >= 1")
    validate_image(image, model.image_shape)
    vocab = model.vocabulary
    ids: list[int] = []
    with torch.no_grad():
        for _ in range(max_len):
            step = model.step(prompt, image, TokenSequence(tuple(ids), vocab))
            next_id = int(step.logits.argmax())
            if next_id == vocab.eos_id:
                break
            ids.append(next_id)
    return TokenSequence(tuple(ids), vocab)


def decode_latent(generator: Generator, latent: torch.Tensor) -> torch.Tensor:
    """Decode a single latent vector into an image."""
    if latent.ndim != 1 or latent.shape[0] != generator.latent_dim:
        raise ContractViolationError(
            f"latent of dimension {tuple(latent.shape)} does not match "
            f"generator latent_dim {generator.latent_dim}"
        )
    return generator.decode(latent.unsqueeze(0))[0]


_MODEL_REGISTRY: dict[str, Callable[[str], TargetModel]] = {}
_GENERATOR_REGISTRY: dict[str, Callable[[str], Generator]] = {}
_FEATURE_REGISTRY: dict[str, Callable[[str], object]] = {}


def register_model(name: str):
    def wrap(loader):
        _MODEL_REGISTRY[name] = loader
        return loader

    return wrap


def register_generator(name: str):
    def wrap(loader):
        _GENERATOR_REGISTRY[name] = loader
        return loader

    return wrap


def register_feature_extractor(name: str):
    """Mount point for optional external feature networks (e.g. a face embedder)."""

    def wrap(loader):
        _FEATURE_REGISTRY[name] = loader
        return loader

    return wrap


def load_model(name: str, checkpoint_path: str) -> TargetModel:
    if name not in _MODEL_REGISTRY:
        raise ConfigurationError(
            f"no target model registered under {name!r}; known: {sorted(_MODEL_REGISTRY)}"
        )
    return _MODEL_REGISTRY[name](checkpoint_path)


def load_generator(name: str, checkpoint_path: str) -> Generator:
    if name not in _GENERATOR_REGISTRY:
        raise ConfigurationError(
            f"no generator registered under {name!r}; known: {sorted(_GENERATOR_REGISTRY)}"
        )
    return _GENERATOR_REGISTRY[name](checkpoint_path)


def load_feature_extractor(name: str, checkpoint_path: str):
    if name not in _FEATURE_REGISTRY:
        raise ConfigurationError(
            f"no feature extractor registered under {name!r}; known: {sorted(_FEATURE_REGISTRY)}"
        )
    return _FEATURE_REGISTRY[name](checkpoint_path)
