"""Command-line entry point: gen | split | train | eval | report | stats.

Every command is a pure function of (config file, overrides, seed) up to
timestamps. Exit codes: 0 success, 1 usage/config error, 2 data error,
3 internal invariant violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np
import torch
import yaml

from . import datamodel, evaluator
from .datamodel import (
    PolicyError, SplitPolicy, apply_splits, build_query_gallery,
    compute_normalization, ingest_real, paper_scale_policy,
    records_from_metadata, write_splits,
)
from .domadapt import DAConfig
from .losses import LossWeights
from .model import ModelConfig, TransReI3D, load_checkpoint, save_checkpoint
from .synthgen import (
    ConfigError, DamageProbabilities, GeneratorConfig, generate_dataset,
    load_metadata,
)
from .trainer import AugmentToggles, TrainConfig, Trainer

log = logging.getLogger("bbb")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


class DataError(RuntimeError):
    """Missing or malformed input data (distinct from config errors)."""


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg: dict = {}
    if path:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as f:
            cfg = yaml.safe_load(f) or {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, _, raw = item.partition("=")
        value = yaml.safe_load(raw)
        node = cfg
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
        log.info("override applied: %s = %r", key, value)
    return cfg


def _out_dir(args, cfg: dict) -> str:
    out = args.out or cfg.get("out") or os.environ.get("BBB_OUT")
    if not out:
        raise ConfigError("no output directory (use --out or BBB_OUT)")
    os.makedirs(out, exist_ok=True)
    return out


# --- gen ------------------------------------------------------------------

def _gen_config(cfg: dict) -> GeneratorConfig:
    section = dict(cfg.get("gen", {}))
    probs = DamageProbabilities(**section.pop("probs", {}))
    known = {f for f in GeneratorConfig.__dataclass_fields__ if f != "probs"}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown gen config keys: {sorted(unknown)}")
    gen_cfg = GeneratorConfig(probs=probs, **section)
    if "uniform_color" in section:
        gen_cfg.uniform_color = tuple(section["uniform_color"])
    if "focal_range" in section:
        gen_cfg.focal_range = tuple(section["focal_range"])
    return gen_cfg


def cmd_gen(args, cfg: dict) -> int:
    out = _out_dir(args, cfg)
    manifest = generate_dataset(_gen_config(cfg), args.seed, out)
    print(json.dumps(manifest["counts"], sort_keys=True))
    return EXIT_OK


# --- split ----------------------------------------------------------------

def _split_policy(cfg: dict) -> SplitPolicy:
    section = dict(cfg.get("split", {}))
    section.pop("dataset_dir", None)
    if section.pop("preset", None) == "paper":
        return paper_scale_policy()
    known = set(SplitPolicy.__dataclass_fields__)
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown split config keys: {sorted(unknown)}")
    if "train_models" not in section:
        raise ConfigError("split config requires train_models (or preset: paper)")
    return SplitPolicy(**section)


def _dataset_dir(args, cfg: dict, section: str) -> str:
    d = getattr(args, "dataset", None) or cfg.get(section, {}).get("dataset_dir")
    if not d:
        raise ConfigError(f"{section} requires dataset_dir")
    if not os.path.isfile(os.path.join(d, "metadata.jsonl")):
        raise DataError(f"no metadata.jsonl under {d}")
    return d


def cmd_split(args, cfg: dict) -> int:
    dataset_dir = _dataset_dir(args, cfg, "split")
    records = records_from_metadata(load_metadata(dataset_dir))
    splits = datamodel.split_dataset(records, _split_policy(cfg), args.seed)
    path = os.path.join(dataset_dir, "splits.json")
    write_splits(splits, path)
    print(json.dumps({k: len(v) for k, v in splits.items()}, sort_keys=True))
    return EXIT_OK


# --- train ----------------------------------------------------------------

def _load_split_records(dataset_dir: str):
    records = records_from_metadata(load_metadata(dataset_dir), dataset_dir)
    path = os.path.join(dataset_dir, "splits.json")
    if not os.path.isfile(path):
        raise DataError(f"no splits.json under {dataset_dir}; run `bbb split` first")
    # splits.json stores dataset-relative image paths
    rel = records_from_metadata(load_metadata(dataset_dir))
    with open(path) as f:
        mapping = json.load(f)
    out: dict = {}
    for abs_rec, rel_rec in zip(records, rel):
        split = mapping.get(rel_rec.image_ref)
        if split is None:
            continue
        abs_rec.split = split
        out.setdefault(split, []).append(abs_rec)
    return out


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    section = dict(cfg.get("train", {}))
    for drop in ("dataset_dir", "model", "losses", "da", "real"):
        section.pop(drop, None)
    augment = AugmentToggles(**section.pop("augment", {}))
    known = {f for f in TrainConfig.__dataclass_fields__ if f != "augment"}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    section.setdefault("seed", seed)
    return TrainConfig(augment=augment, **section)


def cmd_train(args, cfg: dict) -> int:
    out = _out_dir(args, cfg)
    dataset_dir = _dataset_dir(args, cfg, "train")
    train_cfg = _train_config(cfg, args.seed)

    splits = _load_split_records(dataset_dir)
    synth_records = splits.get("train", [])
    if not synth_records:
        raise DataError("train split is empty")

    real_records = None
    real_cfg = cfg.get("train", {}).get("real")
    if real_cfg:
        real_all = ingest_real(real_cfg["image_dir"], real_cfg["labels_file"],
                               seed=args.seed)
        real_records = [r for r in real_all if r.split == "real_train"]
    if train_cfg.mode in ("bl_real", "dann", "pada") and not real_records:
        raise ConfigError(f"mode {train_cfg.mode} requires real data "
                          "(train.real.image_dir / labels_file)")

    torch.manual_seed(args.seed)
    np.random.seed(args.seed % 2**32)

    ids = sorted({r.instance_id for r in synth_records})
    models = sorted({r.model_name for r in synth_records})
    model_section = dict(cfg.get("train", {}).get("model", {}))
    model_section.setdefault("num_ids", len(ids))
    model_section.setdefault("num_models", len(models))
    model_cfg = ModelConfig(**model_section)
    model = TransReI3D(model_cfg)

    normalization = compute_normalization(synth_records)
    weights = LossWeights(**cfg.get("train", {}).get("losses", {}))
    da_section = dict(cfg.get("train", {}).get("da", {}))
    if train_cfg.mode in ("dann", "pada"):
        da_section.setdefault("mode", train_cfg.mode)
    da_cfg = DAConfig(**da_section)

    trainer = Trainer(model, train_cfg, weights, normalization, da_cfg)
    history = trainer.fit(synth_records, real_records)

    ckpt = os.path.join(out, "checkpoint.pt")
    save_checkpoint(ckpt, model, normalization,
                    extra={"mode": train_cfg.mode, "seed": args.seed,
                           "dataset_dir": dataset_dir})
    with open(os.path.join(out, "train_log.jsonl"), "w") as f:
        for entry in history:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
    print(json.dumps({"checkpoint": ckpt, "epochs": len(history)}))
    return EXIT_OK


# --- eval / report --------------------------------------------------------

def _load_model(args, cfg: dict, section: str):
    path = getattr(args, "checkpoint", None) or cfg.get(section, {}).get("checkpoint")
    if not path:
        raise ConfigError(f"{section} requires a checkpoint path")
    if not os.path.isfile(path):
        raise DataError(f"checkpoint not found: {path}")
    model, payload = load_checkpoint(path)
    mean = payload.get("normalization_mean")
    std = payload.get("normalization_std")
    if mean is None or std is None:
        raise DataError("checkpoint carries no normalization statistics")
    return model, (np.array(mean), np.array(std))


def cmd_eval(args, cfg: dict) -> int:
    out = _out_dir(args, cfg)
    model, normalization = _load_model(args, cfg, "eval")
    section = cfg.get("eval", {})
    split = section.get("split", "val")

    synth_records = None
    if section.get("dataset_dir") or getattr(args, "dataset", None):
        dataset_dir = _dataset_dir(args, cfg, "eval")
        synth_records = _load_split_records(dataset_dir).get(split, [])

    real_records = None
    real_cfg = section.get("real")
    if real_cfg:
        real_all = ingest_real(real_cfg["image_dir"], real_cfg["labels_file"],
                               seed=args.seed)
        real_records = [r for r in real_all
                        if r.split == real_cfg.get("split", "real_test")]

    if not synth_records and not real_records:
        raise DataError("nothing to evaluate: no synthetic split and no real data")

    report = evaluator.evaluate(model, normalization, synth_records, real_records,
                                seeds=section.get("seeds", [args.seed]))
    path = os.path.join(out, "report.json")
    evaluator.write_report(report, path)
    print(json.dumps(report.get("summary", {}), sort_keys=True))
    return EXIT_OK


def cmd_report(args, cfg: dict) -> int:
    out = _out_dir(args, cfg)
    model, normalization = _load_model(args, cfg, "report")
    section = cfg.get("report", {})
    dataset_dir = _dataset_dir(args, cfg, "report")
    split = section.get("split", "val")
    top_k = int(section.get("top_k", 5))

    records = _load_split_records(dataset_dir).get(split, [])
    queries, gallery, _ = build_query_gallery(records)
    if not queries:
        raise DataError(f"split {split} has no usable query/gallery pairs")
    q_emb = evaluator.compute_embeddings(model, queries, normalization)
    g_emb = evaluator.compute_embeddings(model, gallery, normalization)
    rankings = evaluator.rank_queries(
        q_emb, np.array([r.instance_id for r in queries]),
        g_emb, np.array([r.instance_id for r in gallery]))
    evaluator.retrieval_report(rankings, queries, gallery,
                               os.path.join(out, "retrieval.png"),
                               os.path.join(out, "retrieval.txt"), top_k=top_k)
    ids = np.array([r.instance_id for r in queries])
    evaluator.export_embeddings(os.path.join(out, "query_embeddings.txt"), ids, q_emb)
    print(json.dumps({"queries": len(queries), "gallery": len(gallery)}))
    return EXIT_OK


# --- stats ----------------------------------------------------------------

def _binomial_ci(p: float, n: int, z: float = 2.576):
    """99% normal-approximation binomial CI around expectation p."""
    if n == 0:
        return (0.0, 1.0)
    half = z * (p * (1 - p) / n) ** 0.5
    return (max(p - half, 0.0), min(p + half, 1.0))


def dataset_stats(dataset_dir: str) -> list[dict]:
    """Audit table: empirical label frequencies vs configured probabilities."""
    metadata = load_metadata(dataset_dir)
    manifest_path = os.path.join(dataset_dir, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise DataError(f"no manifest.json under {dataset_dir}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    probs = manifest["config"]["probs"]

    before = [m for m in metadata if m["phase"] == "before"]
    after = [m for m in metadata if m["phase"] == "after"]
    n_all, n_before, n_after = len(metadata), len(before), len(after)

    p_frame = probs["after_frame"]
    rows_spec = [
        ("after_frame_damaged", after, lambda m: m["bent"] or m["broken"], p_frame),
        ("after_bent_only", after, lambda m: m["bent"] and not m["broken"], p_frame / 3),
        ("after_broken_only", after, lambda m: m["broken"] and not m["bent"], p_frame / 3),
        ("after_bent_and_broken", after, lambda m: m["bent"] and m["broken"], p_frame / 3),
        ("overall_frame_damaged", metadata, lambda m: m["bent"] or m["broken"],
         p_frame * n_after / max(n_all, 1)),
        ("before_dirt", before, lambda m: m["dirt"] != "none", probs["before_dirt"]),
        ("after_dirt", after, lambda m: m["dirt"] != "none", probs["after_dirt"]),
    ]
    for i, part in enumerate(("front_wheel", "rear_wheel", "seat", "handlebar",
                              "pedals")):
        rows_spec.append((f"after_missing_{part}", after,
                          lambda m, i=i: m["missing"][i], probs["part_removed"]))

    rows = []
    for name, subset, pred, expected in rows_spec:
        n = len(subset)
        count = sum(1 for m in subset if pred(m))
        freq = count / n if n else 0.0
        lo, hi = _binomial_ci(expected, n)
        rows.append({
            "label": name, "count": count, "n": n,
            "freq": round(freq, 4), "expected": round(expected, 4),
            "ci_low": round(lo, 4), "ci_high": round(hi, 4),
            "pass": bool(lo <= freq <= hi),
        })
    return rows


def cmd_stats(args, cfg: dict) -> int:
    dataset_dir = getattr(args, "dataset", None) or cfg.get("stats", {}).get("dataset_dir")
    if not dataset_dir:
        raise ConfigError("stats requires a dataset directory")
    if not os.path.isfile(os.path.join(dataset_dir, "metadata.jsonl")):
        raise DataError(f"no metadata.jsonl under {dataset_dir}")
    rows = dataset_stats(dataset_dir)
    header = f"{'label':<26}{'count':>8}{'n':>8}{'freq':>9}{'expect':>9}" \
             f"{'ci_low':>9}{'ci_high':>9}  pass"
    print(header)
    for r in rows:
        print(f"{r['label']:<26}{r['count']:>8}{r['n']:>8}{r['freq']:>9.4f}"
              f"{r['expected']:>9.4f}{r['ci_low']:>9.4f}{r['ci_high']:>9.4f}"
              f"  {'ok' if r['pass'] else 'FAIL'}")
    return EXIT_OK if all(r["pass"] for r in rows) else EXIT_DATA


# --- entry point ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bbb")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_dataset, needs_ckpt in (
            ("gen", False, False), ("split", True, False), ("train", True, False),
            ("eval", True, True), ("report", True, True), ("stats", True, False)):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None)
        p.add_argument("--override", action="append", default=[])
        if needs_dataset:
            p.add_argument("--dataset", default=None)
        if needs_ckpt:
            p.add_argument("--checkpoint", default=None)
    return parser


COMMANDS = {
    "gen": cmd_gen,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
    "stats": cmd_stats,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.override)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, PolicyError, TypeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except AssertionError as e:
        print(f"internal invariant violation: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
