"""Attack metrics: substring match rate, classifier-based top-k accuracy, feature distances.

The evaluation classifier is trained on the private split and shares no
parameters with the attacked model. Judge-based and human accuracy protocols
are external by design: the report schema reserves ``attacc_mllm`` /
``attacc_human`` fields that can be imported from outside, and a pre-trained
face embedder can be mounted through the feature-extractor registry to fill
``delta_face``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import matplotlib
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .core import (
    DTYPE,
    ConfigurationError,
    ContractViolationError,
    TargetModel,
    TokenSequence,
    derive_seed,
    generate_text,
)
from .toy.data import DatasetBundle

log = logging.getLogger("vlminvert")


class EvalClassifier(nn.Module):
    """Small CNN over identity labels; its penultimate layer supplies eval features."""

    def __init__(self, label_ids: list[int], image_size: int = 32, feature_dim: int = 64):
        super().__init__()
        self.image_size = image_size
        self.feature_dim = feature_dim
        self.register_buffer("label_ids", torch.tensor(sorted(label_ids), dtype=torch.long))
        self.conv = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1), nn.GELU(), nn.AvgPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1), nn.GELU(), nn.AvgPool2d(2),
        )
        flat = 32 * (image_size // 4) ** 2
        self.fc = nn.Linear(flat, feature_dim)
        self.head = nn.Linear(feature_dim, len(label_ids))

    def config(self) -> dict:
        return {"label_ids": [int(i) for i in self.label_ids],
                "image_size": self.image_size, "feature_dim": self.feature_dim}

    def features(self, images: torch.Tensor) -> torch.Tensor:
        h = self.conv(images).flatten(1)
        return F.gelu(self.fc(h))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(images))

    def class_index(self, identity: int) -> int | None:
        hits = (self.label_ids == identity).nonzero()
        return int(hits[0, 0]) if hits.numel() else None


def train_eval_classifier(bundle: DatasetBundle, epochs: int = 40, seed: int = 0,
                          batch_size: int = 64, lr: float = 1e-3,
                          feature_dim: int = 64) -> tuple[EvalClassifier, dict]:
    """Train the identity classifier on the private split; gate is >= 95% train accuracy."""
    examples = bundle.split("private")
    if not examples:
        raise ConfigurationError("private split is empty")
    label_ids = sorted({ex.identity for ex in examples})
    index = {identity: i for i, identity in enumerate(label_ids)}

    torch.manual_seed(derive_seed(seed, "classifier-init"))
    clf = EvalClassifier(label_ids, image_size=bundle.image_size, feature_dim=feature_dim)
    images = bundle.load_images(examples).to(torch.float32)
    labels = torch.tensor([index[ex.identity] for ex in examples], dtype=torch.long)

    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    shuffler = torch.Generator().manual_seed(derive_seed(seed, "classifier-shuffle"))
    count = len(examples)
    accuracy = 0.0
    for epoch in range(epochs):
        order = torch.randperm(count, generator=shuffler)
        for start in range(0, count, batch_size):
            idx = order[start : start + batch_size]
            loss = F.cross_entropy(clf(images[idx]), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        if (epoch + 1) % 5 == 0 or epoch == epochs - 1:
            with torch.no_grad():
                accuracy = float((clf(images).argmax(-1) == labels).float().mean())
            if accuracy == 1.0:
                break

    if accuracy < 0.95:
        log.warning("under-trained evaluation classifier: train accuracy %.4f below 0.95",
                    accuracy)
    clf = clf.to(DTYPE)
    clf.eval()
    clf.requires_grad_(False)
    return clf, {"train_accuracy": accuracy, "n_examples": count}


def save_eval_classifier(path, clf: EvalClassifier, seed: int, stats: dict) -> None:
    torch.save({"kind": "eval_classifier", "config": clf.config(),
                "state_dict": {k: v.to(DTYPE) if v.is_floating_point() else v
                               for k, v in clf.state_dict().items()},
                "seed": seed, "stats": stats}, path)


def load_eval_classifier(path) -> EvalClassifier:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "eval_classifier":
        raise ContractViolationError(f"file at {path} is not an evaluation classifier")
    clf = EvalClassifier(**payload["config"]).to(DTYPE)
    clf.load_state_dict(payload["state_dict"])
    clf.eval()
    clf.requires_grad_(False)
    return clf


def match_rate(model: TargetModel, prompt: TokenSequence, images: torch.Tensor,
               answers: list[str], max_decode_len: int = 8,
               normalize: bool = False) -> tuple[float, list[bool]]:
    """Fraction of reconstructions whose greedy decode contains the target answer.

    Case-sensitive exact substring by default; ``normalize`` casefolds and
    strips both sides first.
    """
    if images.shape[0] != len(answers):
        raise ContractViolationError("every reconstruction needs an answer to match against")
    flags = []
    for image, answer in zip(images, answers):
        decoded = generate_text(model, prompt, image, max_len=max_decode_len).text
        if normalize:
            flags.append(answer.casefold().strip() in decoded.casefold().strip())
        else:
            flags.append(answer in decoded)
    rate = float(np.mean(flags)) if flags else 0.0
    return rate, flags


def attack_accuracy(classifier: EvalClassifier, images: torch.Tensor,
                    target_ids: list[int], k: int = 5) -> tuple[float, float, list[dict]]:
    """Top-1/top-k rates of the true identity in the classifier ranking.

    Targets outside the classifier label space get an error verdict and are
    excluded from the rates (their count is in the verdicts).
    """
    if images.shape[0] != len(target_ids):
        raise ContractViolationError("every reconstruction needs a target label")
    verdicts: list[dict] = []
    top1_hits, topk_hits, counted = 0, 0, 0
    with torch.no_grad():
        logits = classifier(images)
    ranked = logits.argsort(dim=-1, descending=True)
    for row, identity in enumerate(target_ids):
        cls = classifier.class_index(int(identity))
        if cls is None:
            verdicts.append({"target": int(identity), "status": "label_not_in_classifier"})
            continue
        ranks = ranked[row].tolist()
        top1 = ranks[0] == cls
        topk = cls in ranks[:k]
        verdicts.append({"target": int(identity), "status": "ok",
                         "top1": bool(top1), f"top{k}": bool(topk)})
        counted += 1
        top1_hits += int(top1)
        topk_hits += int(topk)
    if counted == 0:
        return 0.0, 0.0, verdicts
    return top1_hits / counted, topk_hits / counted, verdicts


def feature_distance(extractor, reconstruction: torch.Tensor,
                     private_images: torch.Tensor) -> float:
    """Mean L2 distance between the reconstruction's features and each private image's."""
    if private_images.shape[0] < 1:
        raise ConfigurationError("no private images for this label")
    with torch.no_grad():
        rec = extractor.features(reconstruction.unsqueeze(0))[0]
        priv = extractor.features(private_images)
    return float(torch.linalg.vector_norm(priv - rec, dim=-1).mean())


@dataclass
class EvaluationReport:
    """Aggregated metrics over one (strategy, loss) grid cell."""

    config_hash: str
    strategy: str
    loss: str
    status: str = "ok"
    match_rate: float | None = None
    top1: float | None = None
    top5: float | None = None
    delta_eval: float | None = None
    delta_face: float | None = None
    n_targets: int = 0
    n_images: int = 0
    excluded: int = 0
    attacc_mllm: float | None = None  # optional external judge import
    attacc_human: float | None = None  # optional user-study import

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash, "strategy": self.strategy,
            "loss": self.loss, "status": self.status,
            "match_rate": self.match_rate, "top1": self.top1, "top5": self.top5,
            "delta_eval": self.delta_eval, "delta_face": self.delta_face,
            "n_targets": self.n_targets, "n_images": self.n_images,
            "excluded": self.excluded,
            "attacc_mllm": self.attacc_mllm, "attacc_human": self.attacc_human,
        }


def plot_match_rates(cells: list[EvaluationReport], path) -> None:
    """Bar chart of match rate per strategy, grouped by loss."""
    strategies = sorted({c.strategy for c in cells if c.status == "ok"})
    losses = sorted({c.loss for c in cells if c.status == "ok"})
    if not strategies:
        return
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(1, len(losses))
    for j, loss in enumerate(losses):
        xs, ys = [], []
        for i, strat in enumerate(strategies):
            cell = next((c for c in cells if c.strategy == strat and c.loss == loss
                         and c.status == "ok"), None)
            if cell is not None and cell.match_rate is not None:
                xs.append(i + j * width)
                ys.append(cell.match_rate)
        ax.bar(xs, ys, width=width, label=loss)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(strategies))])
    ax.set_xticklabels(strategies)
    ax.set_ylabel("match rate")
    ax.set_ylim(0, 1.05)
    ax.legend(title="loss")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_loss_curves(curves: dict[str, np.ndarray], path) -> None:
    """Mean aggregate loss per step for each (strategy, loss) cell."""
    if not curves:
        return
    fig, ax = plt.subplots(figsize=(7, 4))
    for label in sorted(curves):
        ax.plot(np.arange(1, len(curves[label]) + 1), curves[label], label=label)
    ax.set_xlabel("inversion step")
    ax.set_ylabel("mean aggregate loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
