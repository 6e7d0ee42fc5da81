"""Latent-space model inversion attacks against autoregressive vision-language targets."""

__version__ = "0.1.0"

from .core import (
    AttackConfig,
    ConfigurationError,
    ContractViolationError,
    Generator,
    LatentVector,
    ModelStep,
    NumericError,
    TargetModel,
    TokenSequence,
    Vocabulary,
    decode_latent,
    derive_seed,
    generate_text,
    load_generator,
    load_model,
    register_generator,
    register_model,
    target_step,
)
