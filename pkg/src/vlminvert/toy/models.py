"""Desk-scale differentiable stand-ins: a micro vision-language model and a tiny MLP generator.

Both are ordinary ``nn.Module``s behind the ``TargetModel`` / ``Generator``
contracts. Activations are smooth everywhere (GELU, sigmoid, softmax) so
analytic gradients agree with finite differences through the whole chain.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from ..core import (
    DTYPE,
    ContractViolationError,
    Generator,
    ModelStep,
    TargetModel,
    TokenSequence,
    Vocabulary,
    register_generator,
    register_model,
    validate_image,
)


class ToyVLM(nn.Module, TargetModel):
    """Patch embedding + one causal attention block + vocabulary head.

    Image patches occupy the first positions of the sequence; text follows
    under a causal mask, so every text position can attend to all patches.
    """

    def __init__(self, vocabulary: Vocabulary, image_size: int = 32, patch_size: int = 8,
                 dim: int = 48, heads: int = 4, mlp_ratio: int = 2, max_text_len: int = 16):
        nn.Module.__init__(self)
        if image_size % patch_size != 0:
            raise ContractViolationError("image_size must be a multiple of patch_size")
        self._vocabulary = vocabulary
        self.image_size = image_size
        self.patch_size = patch_size
        self.dim = dim
        self.heads = heads
        self.n_patches = (image_size // patch_size) ** 2
        self.max_text_len = max_text_len

        patch_dim = 3 * patch_size * patch_size
        self.patch_proj = nn.Linear(patch_dim, dim)
        self.token_emb = nn.Embedding(vocabulary.size, dim)
        self.pos_emb = nn.Parameter(torch.zeros(self.n_patches + max_text_len, dim))
        nn.init.normal_(self.pos_emb, std=0.02)

        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.attn_out = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )
        self.ln_f = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, vocabulary.size)

    @property
    def vocabulary(self) -> Vocabulary:
        return self._vocabulary

    @property
    def penultimate_dim(self) -> int:
        return self.dim

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (3, self.image_size, self.image_size)

    def config(self) -> dict:
        return {
            "image_size": self.image_size, "patch_size": self.patch_size,
            "dim": self.dim, "heads": self.heads,
            "mlp_ratio": self.mlp[0].out_features // self.dim,
            "max_text_len": self.max_text_len,
        }

    def text_states(self, images: torch.Tensor, token_ids: torch.Tensor) -> torch.Tensor:
        """Final-layernorm hidden states at every text position, ``(B, L, dim)``."""
        if images.ndim != 4 or tuple(images.shape[1:]) != self.image_shape:
            raise ContractViolationError(
                f"images of shape {tuple(images.shape)} do not match model input "
                f"(B, {', '.join(map(str, self.image_shape))})"
            )
        n_text = token_ids.shape[1]
        if n_text > self.max_text_len:
            raise ContractViolationError(
                f"text length {n_text} exceeds the model maximum {self.max_text_len}"
            )
        patches = F.unfold(images * 2.0 - 1.0, self.patch_size, stride=self.patch_size)
        x_img = self.patch_proj(patches.transpose(1, 2))
        x_txt = self.token_emb(token_ids)
        x = torch.cat([x_img, x_txt], dim=1)
        seq = x.shape[1]
        x = x + self.pos_emb[:seq]

        h = self.ln1(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        dh = self.dim // self.heads

        def split(t):
            return t.view(t.shape[0], seq, self.heads, dh).transpose(1, 2)

        q, k, v = split(q), split(k), split(v)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(dh)
        causal = torch.triu(torch.ones(seq, seq, dtype=torch.bool, device=x.device), 1)
        scores = scores.masked_fill(causal, float("-inf"))
        attn = torch.softmax(scores, dim=-1) @ v
        attn = attn.transpose(1, 2).reshape(x.shape[0], seq, self.dim)
        x = x + self.attn_out(attn)
        x = x + self.mlp(self.ln2(x))
        return self.ln_f(x)[:, self.n_patches:, :]

    def _text_ids(self, prompt: TokenSequence, suffix: tuple[int, ...]) -> torch.Tensor:
        vocab = self.vocabulary
        ids = (vocab.bos_id,) + prompt.ids + suffix
        return torch.tensor([ids], dtype=torch.long)

    def step(self, prompt: TokenSequence, image: torch.Tensor,
             prefix: TokenSequence) -> ModelStep:
        validate_image(image, self.image_shape)
        h = self.text_states(image.unsqueeze(0), self._text_ids(prompt, prefix.ids))
        pen = h[0, -1]
        return ModelStep(logits=self.head(pen), penultimate=pen)

    def answer_scores(self, prompt: TokenSequence, images: torch.Tensor,
                      answer: TokenSequence) -> tuple[torch.Tensor, torch.Tensor]:
        m = len(answer)
        if m < 1:
            raise ContractViolationError("answer must be non-empty")
        ids = self._text_ids(prompt, answer.ids[: m - 1]).expand(images.shape[0], -1)
        h = self.text_states(images, ids)
        pen = h[:, -m:, :]
        return self.head(pen), pen


class ToyGenerator(nn.Module, Generator):
    """Affine-plus-GELU stack from latent space to an image, squashed by a sigmoid.

    The sigmoid keeps pixels strictly inside [0, 1] with nonzero gradient
    everywhere. The sampling prior is the per-coordinate mean/std of the
    training latents, stored as buffers at training time.
    """

    def __init__(self, latent_dim: int = 64, image_size: int = 32,
                 hidden: tuple[int, ...] = (256, 384)):
        nn.Module.__init__(self)
        self._latent_dim = latent_dim
        self.image_size = image_size
        sizes = (latent_dim,) + tuple(hidden)
        layers: list[nn.Module] = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            layers += [nn.Linear(a, b), nn.GELU()]
        layers.append(nn.Linear(sizes[-1], 3 * image_size * image_size))
        self.net = nn.Sequential(*layers)
        self.register_buffer("prior_mean", torch.zeros(latent_dim))
        self.register_buffer("prior_std", torch.ones(latent_dim))

    @property
    def latent_dim(self) -> int:
        return self._latent_dim

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (3, self.image_size, self.image_size)

    def config(self) -> dict:
        hidden = tuple(m.out_features for m in self.net[:-1] if isinstance(m, nn.Linear))
        return {"latent_dim": self._latent_dim, "image_size": self.image_size,
                "hidden": list(hidden)}

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        if latents.ndim != 2 or latents.shape[1] != self._latent_dim:
            raise ContractViolationError(
                f"latents of shape {tuple(latents.shape)} do not match "
                f"(B, {self._latent_dim})"
            )
        flat = torch.sigmoid(self.net(latents))
        return flat.view(latents.shape[0], *self.image_shape)

    def prior_parameters(self) -> tuple[torch.Tensor, torch.Tensor]:
        return self.prior_mean, self.prior_std


def save_checkpoint(path, kind: str, module: nn.Module, seed: int, stats: dict,
                    vocabulary: Vocabulary | None = None) -> None:
    payload = {
        "kind": kind,
        "config": module.config(),
        "state_dict": {k: v.to(DTYPE) if v.is_floating_point() else v
                       for k, v in module.state_dict().items()},
        "seed": seed,
        "stats": stats,
    }
    if vocabulary is not None:
        payload["vocabulary"] = list(vocabulary.tokens)
    torch.save(payload, path)


def _load_payload(path, expected_kind: str) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != expected_kind:
        raise ContractViolationError(
            f"checkpoint at {path} has kind {payload.get('kind')!r}, expected {expected_kind!r}"
        )
    return payload


@register_model("toy_vlm")
def load_toy_vlm(path) -> ToyVLM:
    payload = _load_payload(path, "toy_vlm")
    vocab = Vocabulary(tuple(payload["vocabulary"]))
    model = ToyVLM(vocab, **payload["config"]).to(DTYPE)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    model.requires_grad_(False)
    return model


@register_generator("toy_generator")
def load_toy_generator(path) -> ToyGenerator:
    payload = _load_payload(path, "toy_generator")
    gen = ToyGenerator(**payload["config"]).to(DTYPE)
    gen.load_state_dict(payload["state_dict"])
    gen.eval()
    gen.requires_grad_(False)
    return gen
