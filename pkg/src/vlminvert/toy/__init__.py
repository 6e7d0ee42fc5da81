from .data import (
    DatasetBundle,
    Example,
    SyntheticIdentitySpec,
    build_dataset,
    build_vocabulary,
    load_dataset,
    render_identity_image,
)
from .models import ToyGenerator, ToyVLM, load_toy_generator, load_toy_vlm, save_checkpoint
from .train import train_toy_generator, train_toy_vlm

__all__ = [
    "DatasetBundle",
    "Example",
    "SyntheticIdentitySpec",
    "ToyGenerator",
    "ToyVLM",
    "build_dataset",
    "build_vocabulary",
    "load_dataset",
    "load_toy_generator",
    "load_toy_vlm",
    "render_identity_image",
    "save_checkpoint",
    "train_toy_generator",
    "train_toy_vlm",
]
