"""Synthetic identity VQA dataset: rendered shapes with procedurally derived attributes.

Each identity is a (shape kind, two colors, position, size) signature derived
purely from ``(identity_id, seed)``; samples of an identity add small seeded
jitters. Private and public splits use disjoint identity id ranges. Answers
are unique multi-word synthetic names (2-4 tokens under the whitespace
tokenizer), and no name is a substring of another so substring matching of
decoded text is unambiguous.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from ..core import (
    ConfigurationError,
    DTYPE,
    TokenSequence,
    Vocabulary,
    derive_seed,
)

PROMPT_TEXT = "who is this"
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>")
BACKGROUND = 0.15

_SYLLABLES = tuple(c + v for c in "bdfgklmnprstvz" for v in "aeiou")
_WORD_POOL_SIZE = 48
_NAME_LENGTHS = (2, 3, 4)
_NAME_LENGTH_WEIGHTS = (0.50, 0.35, 0.15)


@dataclass(frozen=True)
class SyntheticIdentitySpec:
    """Rendering attributes and answer name of one identity."""

    identity_id: int
    name: str
    kind: int  # 0 disc, 1 square, 2 triangle
    color_a: tuple[float, float, float]
    color_b: tuple[float, float, float]
    offset: tuple[float, float]  # fraction of image size
    size: float  # radius as fraction of image size


@dataclass(frozen=True)
class Example:
    image_path: str
    prompt: str
    answer: str
    identity: int
    split: str


def _word_pool(seed: int) -> tuple[str, ...]:
    rng = np.random.default_rng(derive_seed(seed, "word-pool"))
    pool: list[str] = []
    seen = set()
    while len(pool) < _WORD_POOL_SIZE:
        n_syll = int(rng.integers(2, 4))
        word = "".join(_SYLLABLES[int(i)] for i in rng.integers(0, len(_SYLLABLES), n_syll))
        if word not in seen:
            seen.add(word)
            pool.append(word)
    return tuple(pool)


def _draw_name(rng: np.random.Generator, pool: tuple[str, ...]) -> str:
    k = int(rng.choice(_NAME_LENGTHS, p=_NAME_LENGTH_WEIGHTS))
    words = rng.choice(len(pool), size=k, replace=False)
    return " ".join(pool[int(i)] for i in words)


def _identity_spec(identity_id: int, seed: int, taken_names: list[str], pool) -> SyntheticIdentitySpec:
    rng = np.random.default_rng(derive_seed(seed, "identity", identity_id))
    kind = int(rng.integers(0, 3))
    hue_a = float(rng.uniform(0, 1))
    hue_b = (hue_a + float(rng.uniform(0.25, 0.75))) % 1.0
    color_a = colorsys.hsv_to_rgb(hue_a, float(rng.uniform(0.55, 0.95)), float(rng.uniform(0.55, 0.95)))
    color_b = colorsys.hsv_to_rgb(hue_b, float(rng.uniform(0.55, 0.95)), float(rng.uniform(0.55, 0.95)))
    offset = (float(rng.uniform(-0.18, 0.18)), float(rng.uniform(-0.18, 0.18)))
    size = float(rng.uniform(0.16, 0.26))

    # Reject names that collide with, contain or are contained in a taken name.
    for attempt in range(1000):
        name_rng = np.random.default_rng(derive_seed(seed, "name", identity_id, attempt))
        name = _draw_name(name_rng, pool)
        if all(name not in other and other not in name for other in taken_names):
            break
    else:
        raise ConfigurationError("could not draw a unique name; enlarge the word pool")
    return SyntheticIdentitySpec(identity_id, name, kind, color_a, color_b, offset, size)


def _shape_distance(kind: int, xs, ys, cx: float, cy: float, r: float):
    if kind == 0:
        return np.hypot(xs - cx, ys - cy) - r
    if kind == 1:
        return np.maximum(np.abs(xs - cx), np.abs(ys - cy)) - r
    # Upward triangle as the max over three outward half-plane distances.
    verts = np.array(
        [[cx, cy - r], [cx - 0.9 * r, cy + 0.7 * r], [cx + 0.9 * r, cy + 0.7 * r]]
    )
    d = np.full_like(xs, -np.inf)
    for a in range(3):
        p0, p1 = verts[a], verts[(a + 1) % 3]
        edge = p1 - p0
        normal = np.array([edge[1], -edge[0]]) / np.hypot(*edge)
        d = np.maximum(d, (xs - p0[0]) * normal[0] + (ys - p0[1]) * normal[1])
    return d


def render_identity_image(
    spec: SyntheticIdentitySpec, sample_index: int, seed: int, image_size: int
) -> np.ndarray:
    """Render one (image_size, image_size, 3) float64 sample of an identity.

    Pure function of (identity, sample index, seed): the jitters are drawn
    from an rng keyed on all three.
    """
    rng = np.random.default_rng(derive_seed(seed, "image", spec.identity_id, sample_index))
    s = float(image_size)
    cx = s / 2 + spec.offset[0] * s + float(rng.uniform(-1.5, 1.5)) * s / 32
    cy = s / 2 + spec.offset[1] * s + float(rng.uniform(-1.5, 1.5)) * s / 32
    r = spec.size * s * float(rng.uniform(0.92, 1.08))
    color_a = np.clip(np.asarray(spec.color_a) + rng.uniform(-0.04, 0.04, 3), 0.05, 0.95)
    color_b = np.clip(np.asarray(spec.color_b) + rng.uniform(-0.04, 0.04, 3), 0.05, 0.95)

    ys, xs = np.mgrid[0:image_size, 0:image_size].astype(np.float64) + 0.5
    aa = 0.75 * s / 32  # soft-edge width keeps gradients alive for the generator
    mask_a = 1.0 / (1.0 + np.exp(_shape_distance(spec.kind, xs, ys, cx, cy, r) / aa))
    mask_b = 1.0 / (1.0 + np.exp(_shape_distance(0, xs, ys, cx, cy, 0.45 * r) / aa))

    img = np.full((image_size, image_size, 3), BACKGROUND, dtype=np.float64)
    img = img * (1 - mask_a[..., None]) + color_a * mask_a[..., None]
    img = img * (1 - mask_b[..., None]) + color_b * mask_b[..., None]
    return np.clip(img, 0.0, 1.0)


def build_vocabulary(pool: tuple[str, ...]) -> Vocabulary:
    words = sorted(set(PROMPT_TEXT.split()) | set(pool))
    return Vocabulary(SPECIAL_TOKENS + tuple(words))


class DatasetBundle:
    """A built dataset on disk plus its vocabulary and identity table."""

    def __init__(self, root: Path, vocabulary: Vocabulary, prompt: str,
                 specs: dict[int, SyntheticIdentitySpec], examples: list[Example],
                 image_size: int, seed: int):
        self.root = Path(root)
        self.vocabulary = vocabulary
        self.prompt = prompt
        self.specs = specs
        self.examples = examples
        self.image_size = image_size
        self.seed = seed
        self._cache: dict[str, torch.Tensor] = {}

    @property
    def prompt_tokens(self) -> TokenSequence:
        return self.vocabulary.encode(self.prompt)

    def split(self, name: str) -> list[Example]:
        return [ex for ex in self.examples if ex.split == name]

    def identities(self, split: str) -> list[int]:
        return sorted({ex.identity for ex in self.examples if ex.split == split})

    def answer_tokens(self, identity: int) -> TokenSequence:
        return self.vocabulary.encode(self.specs[identity].name)

    def load_image(self, example: Example) -> torch.Tensor:
        """Image as a (3, H, W) float64 tensor in [0, 1]."""
        if example.image_path not in self._cache:
            with Image.open(self.root / example.image_path) as im:
                arr = np.asarray(im, dtype=np.float64) / 255.0
            self._cache[example.image_path] = torch.from_numpy(arr).permute(2, 0, 1).to(DTYPE)
        return self._cache[example.image_path]

    def load_images(self, examples: list[Example]) -> torch.Tensor:
        return torch.stack([self.load_image(ex) for ex in examples])


def build_dataset(
    out_dir,
    num_identities: int = 16,
    per_identity: int = 32,
    public_identities: int = 32,
    public_per_identity: int = 64,
    image_size: int = 32,
    seed: int = 0,
) -> DatasetBundle:
    """Render both splits to disk and write the manifest.

    Private identities take ids ``[0, num_identities)``, public identities the
    range above them, so the splits are disjoint by construction. Emits
    ``manifest.jsonl`` (one record per triple), ``vocab.json`` and
    ``dataset.json`` (identity table + build parameters).
    """
    if num_identities < 2:
        raise ConfigurationError("need at least 2 private identities")
    if per_identity < 1 or public_per_identity < 1:
        raise ConfigurationError("per-identity sample counts must be >= 1")

    out_dir = Path(out_dir)
    pool = _word_pool(seed)
    vocab = build_vocabulary(pool)

    specs: dict[int, SyntheticIdentitySpec] = {}
    taken: list[str] = []
    plan = [("private", range(num_identities), per_identity),
            ("public", range(num_identities, num_identities + public_identities), public_per_identity)]
    for _, id_range, _ in plan:
        for identity in id_range:
            spec = _identity_spec(identity, seed, taken, pool)
            specs[identity] = spec
            taken.append(spec.name)

    examples: list[Example] = []
    for split, id_range, count in plan:
        (out_dir / "images" / split).mkdir(parents=True, exist_ok=True)
        for identity in id_range:
            for sample in range(count):
                rel = f"images/{split}/id{identity:03d}_s{sample:03d}.png"
                img = render_identity_image(specs[identity], sample, seed, image_size)
                Image.fromarray((img * 255.0).round().astype(np.uint8)).save(out_dir / rel)
                examples.append(Example(rel, PROMPT_TEXT, specs[identity].name, identity, split))

    with open(out_dir / "manifest.jsonl", "w") as fh:
        for ex in examples:
            fh.write(json.dumps({
                "image": ex.image_path, "prompt": ex.prompt, "answer": ex.answer,
                "identity": ex.identity, "split": ex.split,
            }, sort_keys=True) + "\n")
    with open(out_dir / "vocab.json", "w") as fh:
        json.dump({"tokens": list(vocab.tokens)}, fh, indent=2, sort_keys=True)
    with open(out_dir / "dataset.json", "w") as fh:
        json.dump({
            "seed": seed, "image_size": image_size, "prompt": PROMPT_TEXT,
            "num_identities": num_identities, "per_identity": per_identity,
            "public_identities": public_identities, "public_per_identity": public_per_identity,
            "identities": {
                str(i): {
                    "name": s.name, "kind": s.kind,
                    "color_a": list(s.color_a), "color_b": list(s.color_b),
                    "offset": list(s.offset), "size": s.size,
                } for i, s in sorted(specs.items())
            },
        }, fh, indent=2, sort_keys=True)

    return DatasetBundle(out_dir, vocab, PROMPT_TEXT, specs, examples, image_size, seed)


def load_dataset(root) -> DatasetBundle:
    """Reload a built dataset from its manifest files."""
    root = Path(root)
    with open(root / "vocab.json") as fh:
        vocab = Vocabulary(tuple(json.load(fh)["tokens"]))
    with open(root / "dataset.json") as fh:
        meta = json.load(fh)
    specs = {
        int(i): SyntheticIdentitySpec(
            int(i), d["name"], d["kind"], tuple(d["color_a"]), tuple(d["color_b"]),
            tuple(d["offset"]), d["size"],
        )
        for i, d in meta["identities"].items()
    }
    examples = []
    with open(root / "manifest.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            examples.append(Example(rec["image"], rec["prompt"], rec["answer"],
                                    rec["identity"], rec["split"]))
    return DatasetBundle(root, vocab, meta["prompt"], specs, examples,
                         meta["image_size"], meta["seed"])
