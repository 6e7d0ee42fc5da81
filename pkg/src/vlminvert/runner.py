"""Run orchestration: build artifacts, execute attack grid cells, evaluate, replay.

A run root is laid out as::

    runroot/
      config.json                 resolved, seed-complete config snapshot
      build/                      dataset + checkpoints + build manifest
      attacks/<strategy>/<loss>/id<target>/seed<idx>/
                                  cell snapshot, per-candidate traces, results
      reports/                    metrics.json, per_target.csv, plots

Cells are content-addressed: each cell directory carries a snapshot hash of
everything that determines its outputs, so reruns skip completed cells and a
replay can verify byte-identical regeneration.
"""

from __future__ import annotations

import copy
import logging
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .core import AttackConfig, ConfigurationError, DTYPE, derive_seed
from .evaluation import (
    EvaluationReport,
    attack_accuracy,
    feature_distance,
    load_eval_classifier,
    match_rate,
    plot_loss_curves,
    plot_match_rates,
    save_eval_classifier,
    train_eval_classifier,
)
from .losses import estimate_reg_anchor, load_anchor, save_anchor
from .runio import atomic_write_bytes, canonical_json, read_json, sha256_bytes, sha256_file, write_json
from .selection import final_select, initial_select
from .strategies import read_trace, run_strategy, write_trace
from .toy.data import build_dataset, load_dataset
from .toy.models import load_toy_generator, load_toy_vlm, save_checkpoint
from .toy.train import train_toy_generator, train_toy_vlm

log = logging.getLogger("vlminvert")

RUN_ROOT_ENV = "VLMINVERT_RUN_ROOT"

DEFAULT_CONFIG = {
    "seed": 7,
    "run_root": "runs/toy",
    "dataset": {
        "num_identities": 16,
        "per_identity": 32,
        "public_identities": 32,
        "public_per_identity": 64,
        "image_size": 32,
    },
    "vlm": {"dim": 48, "heads": 4, "mlp_ratio": 2, "epochs": 200, "batch_size": 64,
            "lr": 1e-3},
    "generator": {"latent_dim": 64, "hidden": [256, 384], "encoder_hidden": 384,
                  "epochs": 60, "batch_size": 128, "lr": 1e-3,
                  "holdout_fraction": 0.125, "latent_penalty": 1e-3},
    "classifier": {"epochs": 40, "batch_size": 64, "lr": 1e-3, "feature_dim": 64},
    "attack": {
        "strategies": ["tmi", "tmi-c", "smi", "smi-aw"],
        "losses": ["ce", "mml", "lom"],
        "targets": "all",
        "seeds": 1,
        "steps": 70,
        "update_rate": 0.05,
        "confidence_threshold": 0.999,
        "reg_weight": 1.0,
        "pool_size": 2000,
        "n_candidates": 16,
        "n_augmentations": 10,
        "anchor_pairs": 2000,
        "max_decode_len": 8,
        "optimizer": "sgd",
        "confidence_source": "teacher_forced",
        "anchor_mode": "mean",
        "jobs": 1,
    },
    "evaluation": {"normalize_match": False, "face_extractor": None, "top_k": 5},
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULT_CONFIG)


def merge_config(user: dict) -> dict:
    """Overlay a user config onto the defaults; unknown keys are rejected."""

    def overlay(base, over, path):
        for key, value in over.items():
            if key not in base:
                raise ConfigurationError(f"unknown config key: {'.'.join(path + [key])}")
            if isinstance(base[key], dict) and isinstance(value, dict):
                overlay(base[key], value, path + [key])
            else:
                base[key] = value

    cfg = default_config()
    overlay(cfg, user, [])
    return cfg


def build_hash(cfg: dict) -> str:
    subset = {k: cfg[k] for k in ("seed", "dataset", "vlm", "generator", "classifier")}
    return sha256_bytes(canonical_json(subset).encode())


def full_config_hash(cfg: dict) -> str:
    subset = {k: v for k, v in cfg.items() if k != "run_root"}
    return sha256_bytes(canonical_json(subset).encode())


@dataclass
class Artifacts:
    bundle: object
    model: object
    generator: object
    classifier: object
    build_hash: str


_ARTIFACT_CACHE: dict[str, Artifacts] = {}


def _build_paths(run_root: Path) -> dict:
    build = run_root / "build"
    return {
        "dataset": build / "dataset",
        "toy_vlm": build / "toy_vlm.pt",
        "toy_generator": build / "toy_generator.pt",
        "eval_classifier": build / "eval_classifier.pt",
        "anchor": build / "anchor.pt",
        "manifest": build / "build_manifest.json",
    }


def _artifact_fresh(manifest: dict | None, name: str, path: Path,
                    expected_hash: str, overwrite: bool) -> bool:
    """True if the artifact can be reused; raises on hash corruption."""
    if manifest is None or overwrite or not path.exists():
        return False
    record = manifest.get("artifacts", {}).get(name)
    if record is None or manifest.get("build_hash") != expected_hash:
        return False
    actual = sha256_file(path)
    if actual != record["sha256"]:
        raise ConfigurationError(
            f"artifact {path} does not match its recorded hash "
            f"({actual[:12]} != {record['sha256'][:12]}); refusing to reuse it. "
            "Pass --overwrite to rebuild."
        )
    return True


def build_run(cfg: dict, run_root, overwrite: bool = False) -> dict:
    """Build dataset and checkpoints under the run root; skip fresh artifacts by hash."""
    run_root = Path(run_root)
    run_root.mkdir(parents=True, exist_ok=True)
    paths = _build_paths(run_root)
    paths["dataset"].parent.mkdir(parents=True, exist_ok=True)
    bhash = build_hash(cfg)

    handler = logging.FileHandler(run_root / "build" / "build.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    try:
        manifest = read_json(paths["manifest"]) if paths["manifest"].exists() else None
        artifacts: dict[str, dict] = {}
        seed = cfg["seed"]

        manifest_file = paths["dataset"] / "manifest.jsonl"
        if _artifact_fresh(manifest, "dataset", manifest_file, bhash, overwrite):
            log.info("dataset: reusing existing build (hash match)")
            bundle = load_dataset(paths["dataset"])
        else:
            log.info("dataset: rendering %d private + %d public identities",
                     cfg["dataset"]["num_identities"], cfg["dataset"]["public_identities"])
            bundle = build_dataset(paths["dataset"], seed=derive_seed(seed, "dataset"),
                                   **cfg["dataset"])
        artifacts["dataset"] = {"path": str(manifest_file.relative_to(run_root)),
                                "sha256": sha256_file(manifest_file)}

        if _artifact_fresh(manifest, "toy_vlm", paths["toy_vlm"], bhash, overwrite):
            log.info("toy_vlm: reusing existing checkpoint (hash match)")
        else:
            log.info("toy_vlm: training")
            model, stats = train_toy_vlm(bundle, seed=derive_seed(seed, "vlm"), **cfg["vlm"])
            save_checkpoint(paths["toy_vlm"], "toy_vlm", model, seed, stats,
                            vocabulary=bundle.vocabulary)
            log.info("toy_vlm: %s", stats)
        artifacts["toy_vlm"] = {"path": str(paths["toy_vlm"].relative_to(run_root)),
                                "sha256": sha256_file(paths["toy_vlm"])}

        if _artifact_fresh(manifest, "toy_generator", paths["toy_generator"], bhash, overwrite):
            log.info("toy_generator: reusing existing checkpoint (hash match)")
        else:
            log.info("toy_generator: training")
            gen_cfg = dict(cfg["generator"])
            gen_cfg["hidden"] = tuple(gen_cfg["hidden"])
            gen, stats = train_toy_generator(bundle, seed=derive_seed(seed, "generator"),
                                             **gen_cfg)
            save_checkpoint(paths["toy_generator"], "toy_generator", gen, seed, stats)
            log.info("toy_generator: %s", stats)
        artifacts["toy_generator"] = {
            "path": str(paths["toy_generator"].relative_to(run_root)),
            "sha256": sha256_file(paths["toy_generator"]),
        }

        if _artifact_fresh(manifest, "eval_classifier", paths["eval_classifier"], bhash, overwrite):
            log.info("eval_classifier: reusing existing checkpoint (hash match)")
        else:
            log.info("eval_classifier: training")
            clf, stats = train_eval_classifier(bundle, seed=derive_seed(seed, "classifier"),
                                               **cfg["classifier"])
            save_eval_classifier(paths["eval_classifier"], clf, seed, stats)
            log.info("eval_classifier: %s", stats)
        artifacts["eval_classifier"] = {
            "path": str(paths["eval_classifier"].relative_to(run_root)),
            "sha256": sha256_file(paths["eval_classifier"]),
        }

        out = {"build_hash": bhash, "artifacts": artifacts}
        write_json(paths["manifest"], out)
        write_json(run_root / "config.json", cfg)
        return out
    finally:
        log.removeHandler(handler)
        handler.close()


def load_artifacts(run_root) -> Artifacts:
    run_root = Path(run_root)
    cfg = read_json(run_root / "config.json")
    key = f"{run_root.resolve()}:{build_hash(cfg)}"
    if key not in _ARTIFACT_CACHE:
        paths = _build_paths(run_root)
        for name in ("toy_vlm", "toy_generator", "eval_classifier"):
            if not paths[name].exists():
                raise ConfigurationError(
                    f"missing build artifact {paths[name]}; run `vlminvert build` first"
                )
        _ARTIFACT_CACHE[key] = Artifacts(
            bundle=load_dataset(paths["dataset"]),
            model=load_toy_vlm(paths["toy_vlm"]),
            generator=load_toy_generator(paths["toy_generator"]),
            classifier=load_eval_classifier(paths["eval_classifier"]),
            build_hash=build_hash(cfg),
        )
    return _ARTIFACT_CACHE[key]


def ensure_anchor(cfg: dict, run_root, artifacts: Artifacts):
    """Estimate (or reload) the public-activation anchor for the LOM loss."""
    path = _build_paths(Path(run_root))["anchor"]
    if path.exists():
        return load_anchor(path)
    bundle = artifacts.bundle
    public_images = bundle.load_images(bundle.split("public"))
    anchor = estimate_reg_anchor(
        artifacts.model, bundle.prompt_tokens, public_images,
        count=cfg["attack"]["anchor_pairs"], seed=derive_seed(cfg["seed"], "anchor"),
        model_hash=sha256_file(_build_paths(Path(run_root))["toy_vlm"]),
    )
    save_anchor(path, anchor)
    log.info("anchor: estimated over %d public pairs", anchor.count)
    return anchor


def resolve_targets(cfg: dict, artifacts: Artifacts, targets) -> list[int]:
    known = artifacts.bundle.identities("private")
    if targets in (None, "all"):
        return known
    chosen = [int(t) for t in targets]
    for t in chosen:
        if t not in known:
            raise ConfigurationError(f"target {t} is not a private identity (known: {known})")
    return chosen


def cell_dir(run_root, strategy: str, loss: str, target: int, seed_index: int) -> Path:
    return (Path(run_root) / "attacks" / strategy / loss
            / f"id{target:03d}" / f"seed{seed_index:02d}")


def _cell_snapshot(cfg: dict, bhash: str, strategy: str, loss: str,
                   target: int, seed_index: int, answer: str) -> dict:
    attack = {k: v for k, v in cfg["attack"].items()
              if k not in ("strategies", "losses", "targets", "seeds", "jobs")}
    return {
        "kind": "attack_cell",
        "build_hash": bhash,
        "master_seed": cfg["seed"],
        "strategy": strategy,
        "loss": loss,
        "target": target,
        "seed_index": seed_index,
        "answer": answer,
        "attack": attack,
    }


def _cell_attack_config(cfg: dict, strategy: str, loss: str, target: int,
                        seed_index: int) -> AttackConfig:
    a = cfg["attack"]
    return AttackConfig(
        strategy=strategy, loss=loss, steps=a["steps"], update_rate=a["update_rate"],
        confidence_threshold=a["confidence_threshold"], reg_weight=a["reg_weight"],
        pool_size=a["pool_size"], n_candidates=a["n_candidates"],
        n_augmentations=a["n_augmentations"],
        seed=derive_seed(cfg["seed"], "cell", strategy, loss, target, seed_index),
        max_decode_len=a["max_decode_len"], optimizer=a["optimizer"],
        confidence_source=a["confidence_source"], anchor_mode=a["anchor_mode"],
    )


def run_cell(cfg: dict, run_root, strategy: str, loss: str, target: int,
             seed_index: int, artifacts: Artifacts | None = None) -> Path:
    """Execute one (strategy, loss, target, seed) cell; skip if already complete."""
    run_root = Path(run_root)
    artifacts = artifacts or load_artifacts(run_root)
    bundle = artifacts.bundle
    answer = bundle.specs[target].name
    snapshot = _cell_snapshot(cfg, artifacts.build_hash, strategy, loss, target,
                              seed_index, answer)
    snapshot_hash = sha256_bytes(canonical_json(snapshot).encode())
    directory = cell_dir(run_root, strategy, loss, target, seed_index)

    marker = directory / "cell.json"
    if marker.exists() and (directory / "result.json").exists():
        existing = read_json(marker)
        if existing.get("snapshot_hash") == snapshot_hash:
            log.info("cell %s/%s/id%03d/seed%02d: complete, skipping",
                     strategy, loss, target, seed_index)
            return directory

    attack_cfg = _cell_attack_config(cfg, strategy, loss, target, seed_index)
    anchor = None
    if loss == "lom" or attack_cfg.anchor_mode == "resample":
        anchor = ensure_anchor(cfg, run_root, artifacts)

    prompt = bundle.prompt_tokens
    answer_tokens = bundle.answer_tokens(target)
    candidates, pool_report = initial_select(
        artifacts.model, artifacts.generator, prompt, answer_tokens, loss,
        pool_size=attack_cfg.pool_size, n=attack_cfg.n_candidates,
        seed=attack_cfg.seed, anchor=anchor, reg_weight=attack_cfg.reg_weight,
    )

    directory.mkdir(parents=True, exist_ok=True)
    results = []
    for j, latent in enumerate(candidates):
        result = run_strategy(strategy, artifacts.model, artifacts.generator,
                              prompt, answer_tokens, attack_cfg, w0=latent,
                              anchor=anchor, target_id=target)
        write_trace(directory / f"candidate_{j:02d}.trace.csv", result)
        results.append(result)

    kept, final_report = final_select(
        artifacts.model, results, prompt, answer_tokens,
        n_augmentations=attack_cfg.n_augmentations, seed=attack_cfg.seed,
        anchor=anchor,
    )
    write_json(directory / "selection.json", pool_report)
    write_json(directory / "result.json", {
        "snapshot": snapshot,
        "snapshot_hash": snapshot_hash,
        "candidates": [
            {
                "index": j,
                "candidate_id": res.latent.rng_seed,
                "initial_loss": pool_report["selected_losses"][j],
                "final_latent": [float(v) for v in res.latent.values],
                "total_updates": res.total_updates,
                "final_match": bool(res.final_match),
                "trace": f"candidate_{j:02d}.trace.csv",
            }
            for j, res in enumerate(results)
        ],
        "final_selection": final_report,
    })

    preview = kept[0].image.clamp(0, 1).permute(1, 2, 0).numpy()
    buf_path = directory / "best_candidate.png"
    tmp_fd, tmp_name = tempfile.mkstemp(dir=directory, prefix=".best.")
    os.close(tmp_fd)
    Image.fromarray((preview * 255.0).round().astype(np.uint8)).save(tmp_name, format="PNG")
    os.replace(tmp_name, buf_path)

    write_json(marker, {"snapshot_hash": snapshot_hash, "snapshot": snapshot})
    log.info("cell %s/%s/id%03d/seed%02d: done (%d candidates, %d kept)",
             strategy, loss, target, seed_index, len(results), len(kept))
    return directory


def _cell_worker(args) -> tuple[str, str]:
    cfg, run_root, strategy, loss, target, seed_index = args
    try:
        path = run_cell(cfg, run_root, strategy, loss, target, seed_index)
        return str(path), ""
    except Exception as err:  # propagate as data; the pool swallows tracebacks
        logging.getLogger("vlminvert").exception(
            "cell %s/%s/id%03d/seed%02d failed", strategy, loss, target, seed_index)
        return "", f"{strategy}/{loss}/id{target:03d}/seed{seed_index:02d}: {err}"


def attack_grid(cfg: dict, run_root, strategies=None, losses=None, targets=None,
                seed_indices=None, jobs: int | None = None) -> tuple[int, list[str]]:
    """Run every requested cell; returns (#completed, failure descriptions)."""
    run_root = Path(run_root)
    artifacts = load_artifacts(run_root)
    strategies = strategies or cfg["attack"]["strategies"]
    losses = losses or cfg["attack"]["losses"]
    target_ids = resolve_targets(cfg, artifacts, targets if targets is not None
                                 else cfg["attack"]["targets"])
    if seed_indices is None:
        seed_indices = list(range(cfg["attack"]["seeds"]))
    jobs = jobs or cfg["attack"]["jobs"]

    if cfg["attack"]["losses"] and ("lom" in losses or cfg["attack"]["anchor_mode"] == "resample"):
        ensure_anchor(cfg, run_root, artifacts)  # build once before fanning out

    work = [(cfg, str(run_root), s, l, t, i)
            for s in strategies for l in losses for t in target_ids for i in seed_indices]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_cell_worker, work))
    else:
        outcomes = [_cell_worker(args) for args in work]
    failures = [err for _, err in outcomes if err]
    return len(outcomes) - len(failures), failures


def _decode_latents(generator, latents: list[list[float]]) -> torch.Tensor:
    stacked = torch.tensor(latents, dtype=DTYPE)
    with torch.no_grad():
        return generator.decode(stacked)


def evaluate_run(run_root) -> Path:
    """Aggregate metrics over every completed cell and render the report files."""
    run_root = Path(run_root)
    cfg = read_json(run_root / "config.json")
    artifacts = load_artifacts(run_root)
    bundle = artifacts.bundle
    prompt = bundle.prompt_tokens
    top_k = cfg["evaluation"]["top_k"]
    normalize = cfg["evaluation"]["normalize_match"]
    face = None
    if cfg["evaluation"]["face_extractor"]:
        from .core import load_feature_extractor

        name, _, path = cfg["evaluation"]["face_extractor"].partition(":")
        face = load_feature_extractor(name, path)

    private_by_identity = {
        identity: bundle.load_images([ex for ex in bundle.split("private")
                                      if ex.identity == identity])
        for identity in bundle.identities("private")
    }

    cells: list[EvaluationReport] = []
    per_target_rows: list[list] = []
    chash = full_config_hash(cfg)

    for strategy in cfg["attack"]["strategies"]:
        for loss in cfg["attack"]["losses"]:
            base = run_root / "attacks" / strategy / loss
            cell_dirs = sorted(base.glob("id*/seed*")) if base.exists() else []
            cell_dirs = [d for d in cell_dirs if (d / "result.json").exists()]
            if not cell_dirs:
                cells.append(EvaluationReport(config_hash=chash, strategy=strategy,
                                              loss=loss, status="missing"))
                continue

            kept_latents, answers, target_ids, row_meta = [], [], [], []
            for d in cell_dirs:
                result = read_json(d / "result.json")
                target = result["snapshot"]["target"]
                seed_index = result["snapshot"]["seed_index"]
                kept = set(result["final_selection"]["kept_candidate_ids"])
                for cand in result["candidates"]:
                    if cand["candidate_id"] in kept:
                        kept_latents.append(cand["final_latent"])
                        answers.append(result["snapshot"]["answer"])
                        target_ids.append(target)
                        row_meta.append((target, seed_index, cand["candidate_id"]))

            decoded = _decode_latents(artifacts.generator, kept_latents)
            rate, flags = match_rate(artifacts.model, prompt, decoded, answers,
                                     max_decode_len=cfg["attack"]["max_decode_len"],
                                     normalize=normalize)
            top1, topk, verdicts = attack_accuracy(artifacts.classifier, decoded,
                                                   target_ids, k=top_k)
            deltas, face_deltas = [], []
            for row in range(decoded.shape[0]):
                deltas.append(feature_distance(artifacts.classifier, decoded[row],
                                               private_by_identity[target_ids[row]]))
                if face is not None:
                    face_deltas.append(feature_distance(face, decoded[row],
                                                        private_by_identity[target_ids[row]]))

            excluded = sum(1 for v in verdicts if v["status"] != "ok")
            cells.append(EvaluationReport(
                config_hash=chash, strategy=strategy, loss=loss, status="ok",
                match_rate=rate, top1=top1, top5=topk,
                delta_eval=float(np.mean(deltas)) if deltas else None,
                delta_face=float(np.mean(face_deltas)) if face_deltas else None,
                n_targets=len(set(target_ids)), n_images=decoded.shape[0],
                excluded=excluded,
            ))
            for row, meta in enumerate(row_meta):
                verdict = verdicts[row]
                per_target_rows.append([
                    strategy, loss, meta[0], meta[1], meta[2], int(flags[row]),
                    int(verdict.get("top1", False)), int(verdict.get(f"top{top_k}", False)),
                    repr(deltas[row]), verdict["status"],
                ])

    curves = collect_loss_curves(run_root, cfg)
    reports = run_root / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    write_json(reports / "metrics.json", {
        "config_hash": chash,
        "build_hash": build_hash(cfg),
        "cells": [c.to_dict() for c in cells],
    })
    header = "strategy,loss,target,seed_index,candidate_id,match,top1,top5,delta_eval,status\n"
    body = "\n".join(",".join(str(v) for v in row) for row in per_target_rows)
    atomic_write_bytes(reports / "per_target.csv",
                       (header + body + ("\n" if body else "")).encode())
    plot_match_rates(cells, reports / "match_rate.png")
    plot_loss_curves(curves, reports / "loss_curves.png")
    return reports


def find_run_root(path: Path) -> Path:
    """Walk upward until a directory containing config.json is found."""
    path = Path(path).resolve()
    for candidate in [path] + list(path.parents):
        if (candidate / "config.json").exists() and (candidate / "build").exists():
            return candidate
    raise ConfigurationError(f"no run root found above {path}")


def replay(path) -> tuple[bool, list[tuple[str, bool]]]:
    """Re-execute a persisted cell or report and byte-compare the regenerated files."""
    path = Path(path).resolve()
    run_root = find_run_root(path)
    cfg = read_json(run_root / "config.json")

    if (path / "cell.json").exists():
        snapshot = read_json(path / "cell.json")["snapshot"]
        # The cell snapshot is authoritative for its own attack parameters,
        # even if the run config was edited after the cell ran.
        cell_cfg = copy.deepcopy(cfg)
        cell_cfg["seed"] = snapshot["master_seed"]
        cell_cfg["attack"].update(snapshot["attack"])
        with tempfile.TemporaryDirectory() as tmp:
            tmp_root = Path(tmp) / "root"
            (tmp_root / "build").mkdir(parents=True)
            write_json(tmp_root / "config.json", cell_cfg)
            os.symlink((run_root / "build" / "dataset").resolve(), tmp_root / "build" / "dataset")
            for name in ("toy_vlm.pt", "toy_generator.pt", "eval_classifier.pt", "anchor.pt"):
                source = run_root / "build" / name
                if source.exists():
                    os.symlink(source.resolve(), tmp_root / "build" / name)
            fresh = run_cell(cell_cfg, tmp_root, snapshot["strategy"], snapshot["loss"],
                             snapshot["target"], snapshot["seed_index"])
            names = sorted(p.name for p in path.iterdir()
                           if p.suffix in (".json", ".csv"))
            results = []
            for name in names:
                same = (path / name).read_bytes() == (fresh / name).read_bytes()
                results.append((name, same))
        return all(ok for _, ok in results), results

    if path.name == "reports" or (path / "reports").exists():
        reports = path if path.name == "reports" else path / "reports"
        with tempfile.TemporaryDirectory() as tmp:
            tmp_root = Path(tmp) / "root"
            tmp_root.mkdir(parents=True)
            write_json(tmp_root / "config.json", cfg)
            os.symlink((run_root / "build").resolve(), tmp_root / "build")
            os.symlink((run_root / "attacks").resolve(), tmp_root / "attacks")
            fresh = evaluate_run(tmp_root)
            results = []
            for name in ("metrics.json", "per_target.csv"):
                same = (reports / name).read_bytes() == (fresh / name).read_bytes()
                results.append((name, same))
        return all(ok for _, ok in results), results

    raise ConfigurationError(f"{path} is neither an attack cell nor a reports directory")
