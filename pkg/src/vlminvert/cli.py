"""Command-line surface: build, attack, evaluate, report, replay.

Every value in the config file has a default; ``build --emit-config`` writes
them out. Flags override config keys (``--set section.key=value`` covers
anything without a dedicated flag). The run root comes from ``--run-root``,
else the ``VLMINVERT_RUN_ROOT`` environment variable, else the config.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .core import ConfigurationError, LOSSES, STRATEGIES
from .runio import canonical_json, read_json, write_json
from . import runner

log = logging.getLogger("vlminvert")


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )


def _parse_set(assignments: list[str]) -> dict:
    """Turn ``section.key=value`` pairs into a nested override dict."""
    out: dict = {}
    for item in assignments or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--set expects section.key=value, got {item!r}")
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        try:
            node[parts[-1]] = json.loads(value)
        except json.JSONDecodeError:
            node[parts[-1]] = value
    return out


def _load_config(args) -> dict:
    user = {}
    if getattr(args, "config", None):
        user = read_json(args.config)
    merged = runner.merge_config(user)
    overrides = _parse_set(getattr(args, "set", None))
    if overrides:
        def overlay(dst, src, path):
            for k, v in src.items():
                if k not in dst:
                    raise ConfigurationError(f"unknown config key: {'.'.join(path + [k])}")
                if isinstance(dst[k], dict) and isinstance(v, dict):
                    overlay(dst[k], v, path + [k])
                else:
                    dst[k] = v
        overlay(merged, overrides, [])
    if getattr(args, "seed", None) is not None:
        merged["seed"] = args.seed
    return merged


def _run_root(args, cfg: dict) -> Path:
    if getattr(args, "run_root", None):
        return Path(args.run_root)
    if os.environ.get(runner.RUN_ROOT_ENV):
        return Path(os.environ[runner.RUN_ROOT_ENV])
    return Path(cfg["run_root"])


def _csv_list(text: str | None):
    if text in (None, "", "all"):
        return None
    return [item.strip() for item in text.split(",") if item.strip()]


def cmd_build(args) -> int:
    if args.emit_config:
        payload = canonical_json(runner.default_config())
        if args.emit_config == "-":
            sys.stdout.write(payload)
        else:
            Path(args.emit_config).write_text(payload)
            log.info("wrote default config to %s", args.emit_config)
        return 0
    cfg = _load_config(args)
    root = _run_root(args, cfg)
    manifest = runner.build_run(cfg, root, overwrite=args.overwrite)
    log.info("build complete under %s (build hash %s)", root, manifest["build_hash"][:12])
    return 0


def _attack_selection(args) -> tuple[list, list, list | None, list | None]:
    strategies = _csv_list(args.strategy)
    if strategies is not None:
        for s in strategies:
            if s not in STRATEGIES:
                raise ConfigurationError(f"unknown strategy {s!r} (choose from {STRATEGIES})")
    losses = _csv_list(args.loss)
    if losses is not None:
        for l in losses:
            if l not in LOSSES:
                raise ConfigurationError(f"unknown loss {l!r} (choose from {LOSSES})")
    targets = _csv_list(args.targets)
    if targets is not None:
        targets = [int(t) for t in targets]
    seeds = None
    if args.seeds is not None:
        if args.seeds.isdigit():
            seeds = list(range(int(args.seeds)))
        else:
            seeds = [int(s) for s in args.seeds.split(",")]
    return strategies, losses, targets, seeds


def cmd_attack(args) -> int:
    root = _run_root(args, runner.default_config() if args.config is None
                     else runner.merge_config(read_json(args.config)))
    if not (root / "config.json").exists():
        raise ConfigurationError(f"no build under {root}; run `vlminvert build` first")
    cfg = read_json(root / "config.json")
    overrides = _parse_set(args.set)
    for section in overrides:
        if section not in ("attack", "evaluation"):
            raise ConfigurationError(
                f"attack-time overrides may only touch attack/evaluation keys, not {section!r}")
    if overrides:
        cfg = runner.merge_config(cfg)
        for section, values in overrides.items():
            cfg[section].update(values)
        write_json(root / "config.json", cfg)

    strategies, losses, targets, seeds = _attack_selection(args)
    done, failures = runner.attack_grid(
        cfg, root, strategies=strategies, losses=losses, targets=targets,
        seed_indices=seeds, jobs=args.jobs,
    )
    log.info("attack grid: %d cells complete, %d failed", done, len(failures))
    for failure in failures:
        log.error("failed cell: %s", failure)
    return 1 if failures else 0


def cmd_evaluate(args) -> int:
    cfg = read_json(Path(args.run_root or os.environ.get(runner.RUN_ROOT_ENV, "")) / "config.json") \
        if (args.run_root or os.environ.get(runner.RUN_ROOT_ENV)) else None
    root = _run_root(args, cfg or runner.default_config())
    reports = runner.evaluate_run(root)
    log.info("evaluation written to %s", reports)
    return 0


def cmd_report(args) -> int:
    root = _run_root(args, runner.default_config())
    summary = runner.report_run(root)
    sys.stdout.write(summary)
    return 0


def cmd_replay(args) -> int:
    ok, results = runner.replay(args.path)
    for name, same in results:
        print(f"{'OK      ' if same else 'MISMATCH'} {name}")
    print("replay: byte-identical" if ok else "replay: MISMATCH detected")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vlminvert",
        description="Latent-space inversion attacks against a vision-language target, "
                    "with a self-contained toy stack.",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="build dataset and train the toy checkpoints")
    p.add_argument("--config", help="config JSON (missing keys take defaults)")
    p.add_argument("--run-root", help="output directory for the run")
    p.add_argument("--seed", type=int, help="master seed override")
    p.add_argument("--overwrite", action="store_true",
                   help="rebuild artifacts even when hashes match or are corrupt")
    p.add_argument("--emit-config", metavar="PATH",
                   help="write the full default config (use - for stdout) and exit")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key, e.g. --set dataset.num_identities=8")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("attack", help="run inversion cells over the strategy/loss grid")
    p.add_argument("--config", help="config JSON used only to locate the run root")
    p.add_argument("--run-root", help="run root containing a completed build")
    p.add_argument("--strategy", default=None,
                   help="comma list or 'all' (tmi,tmi-c,smi,smi-aw)")
    p.add_argument("--loss", default=None, help="comma list or 'all' (ce,mml,lom)")
    p.add_argument("--targets", default=None, help="comma list of identity ids or 'all'")
    p.add_argument("--seeds", default=None,
                   help="replicate count (e.g. 10) or explicit comma list of seed indices")
    p.add_argument("--jobs", type=int, default=None, help="parallel worker processes")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override attack/evaluation config keys, e.g. --set attack.steps=70")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="compute metrics over completed cells")
    p.add_argument("--run-root", help="run root to evaluate")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="print the metric table and re-render plots")
    p.add_argument("--run-root", help="run root with an existing evaluation")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("replay", help="re-execute a persisted cell or report and byte-compare")
    p.add_argument("path", help="attack cell directory, reports directory or run root")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except ConfigurationError as err:
        log.error("%s", err)
        return 2


if __name__ == "__main__":
    sys.exit(main())
