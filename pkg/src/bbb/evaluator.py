"""Retrieval and classification metrics: mAP, CMC-K, AUROC, reports."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw
from scipy.stats import rankdata

import torch

from .datamodel import SampleRecord, build_query_gallery
from .model import DAMAGE_HEAD_ORDER, TransReI3D
from .trainer import ImageCache, make_batch_tensors


@dataclass
class RankingResult:
    query_id: int
    gallery_ids: np.ndarray  # ordered by ascending distance
    distances: np.ndarray  # non-decreasing
    rank_of_true: int  # 1-based


def rank_queries(query_embeddings: np.ndarray, query_ids: np.ndarray,
                 gallery_embeddings: np.ndarray,
                 gallery_ids: np.ndarray) -> list[RankingResult]:
    """Full ranking per query; distance = 1 - cosine on normalized embeddings.

    Ties are broken by gallery id ascending so reports are reproducible.
    """
    gallery_ids = np.asarray(gallery_ids)
    missing = set(np.asarray(query_ids).tolist()) - set(gallery_ids.tolist())
    if missing:
        raise ValueError(f"query IDs absent from gallery: {sorted(missing)[:5]}")
    dist = 1.0 - query_embeddings @ gallery_embeddings.T
    results = []
    for qi, qid in enumerate(query_ids):
        order = np.lexsort((gallery_ids, dist[qi]))
        ordered_ids = gallery_ids[order]
        rank = int(np.nonzero(ordered_ids == qid)[0][0]) + 1
        results.append(RankingResult(
            query_id=int(qid),
            gallery_ids=ordered_ids,
            distances=dist[qi][order],
            rank_of_true=rank,
        ))
    return results


def cmc_at_k(rankings: list[RankingResult], K: int) -> float:
    """Fraction of queries whose true match appears within the top K."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if not rankings:
        raise ValueError("empty rankings")
    return float(np.mean([r.rank_of_true <= K for r in rankings]))


def mean_ap(rankings: list[RankingResult]) -> float:
    """mAP under the single-relevant-gallery protocol: AP = 1/rank."""
    if not rankings:
        raise ValueError("empty rankings")
    return float(np.mean([1.0 / r.rank_of_true for r in rankings]))


def average_precision_multi(relevance: np.ndarray) -> float:
    """Standard AP (mean precision-at-hit) for a ranked binary relevance list."""
    relevance = np.asarray(relevance, dtype=bool)
    n_rel = relevance.sum()
    if n_rel == 0:
        raise ValueError("no relevant items")
    hits = np.flatnonzero(relevance)
    precisions = (np.arange(len(hits)) + 1) / (hits + 1)
    return float(precisions.mean())


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUROC: P(score_pos > score_neg) with ties credited 0.5."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs at least one positive and one negative")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def macro_auroc(scores: np.ndarray, labels: np.ndarray):
    """Per-label AUROC over the 7 damage heads; degenerate labels excluded.

    Returns (per_label dict, macro mean over defined labels, excluded names).
    """
    per_label = {}
    excluded = []
    for i, name in enumerate(DAMAGE_HEAD_ORDER):
        try:
            per_label[name] = auroc(scores[:, i], labels[:, i])
        except ValueError:
            excluded.append(name)
    macro = float(np.mean(list(per_label.values()))) if per_label else float("nan")
    return per_label, macro, excluded


# --- model-driven evaluation ---------------------------------------------

def compute_embeddings(model: TransReI3D, records: list[SampleRecord],
                       normalization, batch_size: int = 32,
                       cache: ImageCache | None = None,
                       use_local: bool = True) -> np.ndarray:
    model.eval()
    cache = cache or ImageCache()
    out = []
    for i in range(0, len(records), batch_size):
        batch = make_batch_tensors(records[i:i + batch_size], normalization, cache)
        e = model.inference_embedding(batch["images"], batch["camera_index"],
                                      use_local=use_local)
        out.append(e.numpy())
    return np.concatenate(out) if out else np.zeros((0, 0))


def compute_damage_scores(model: TransReI3D, records: list[SampleRecord],
                          normalization, batch_size: int = 32,
                          cache: ImageCache | None = None):
    model.eval()
    cache = cache or ImageCache()
    scores, labels = [], []
    with torch.no_grad():
        for i in range(0, len(records), batch_size):
            batch = make_batch_tensors(records[i:i + batch_size], normalization, cache)
            outputs = model(batch["images"], batch["camera_index"],
                            tasks=frozenset({"damage"}))
            scores.append(torch.sigmoid(outputs["damage_logits"]).numpy())
            labels.append(batch["labels"].numpy())
    return (np.concatenate(scores), np.concatenate(labels)) if scores else \
        (np.zeros((0, 7)), np.zeros((0, 7)))


def _reid_section(model, records, normalization, cache) -> tuple[dict, list]:
    queries, gallery, excluded = build_query_gallery(records)
    if not queries or not gallery:
        return {"notice": "split lacks before/after pairs; ReID omitted"}, []
    q_emb = compute_embeddings(model, queries, normalization, cache=cache)
    g_emb = compute_embeddings(model, gallery, normalization, cache=cache)
    rankings = rank_queries(q_emb, np.array([r.instance_id for r in queries]),
                            g_emb, np.array([r.instance_id for r in gallery]))
    section = {
        "map": mean_ap(rankings),
        "cmc1": cmc_at_k(rankings, 1),
        "cmc5": cmc_at_k(rankings, 5),
        "cmc10": cmc_at_k(rankings, 10),
        "n_queries": len(queries),
        "n_gallery": len(gallery),
        "excluded_ids": excluded,
    }
    return section, rankings


def _dd_section(model, records, normalization, cache) -> dict:
    scores, labels = compute_damage_scores(model, records, normalization, cache=cache)
    if len(scores) == 0:
        return {"notice": "no records"}
    per_label, macro, excluded_labels = macro_auroc(scores, labels)
    return {
        "auroc_macro": macro,
        "auroc_bent": per_label.get("bent"),
        "auroc_broken": per_label.get("broken"),
        "auroc_per_label": per_label,
        "excluded_labels": excluded_labels,
        "n_samples": int(len(scores)),
    }


def evaluate(model: TransReI3D, normalization,
             synth_records: list[SampleRecord] | None,
             real_records: list[SampleRecord] | None = None,
             seeds: list[int] | None = None) -> dict:
    """MetricReport over one or more evaluation runs (mean and std per key)."""
    seeds = seeds or [0]
    cache = ImageCache()
    runs = []
    for seed in seeds:
        run: dict = {"seed": seed}
        if synth_records:
            reid, _ = _reid_section(model, synth_records, normalization, cache)
            run["reid"] = reid
            run["dd_synthetic"] = _dd_section(model, synth_records, normalization, cache)
        if real_records:
            run["dd_real"] = _dd_section(model, real_records, normalization, cache)
        runs.append(run)

    report: dict = {"runs": runs, "n_runs": len(runs)}
    # aggregate scalar keys across runs
    summary: dict = {}
    for section in ("reid", "dd_synthetic", "dd_real"):
        vals: dict[str, list[float]] = {}
        for run in runs:
            for key, v in run.get(section, {}).items():
                if isinstance(v, (int, float)) and v is not None:
                    vals.setdefault(key, []).append(float(v))
        if vals:
            summary[section] = {
                k: {"mean": float(np.mean(vs)), "std": float(np.std(vs))}
                for k, vs in vals.items()}
    report["summary"] = summary
    return report


def write_report(report: dict, path: str):
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)


def export_embeddings(path: str, ids: np.ndarray, embeddings: np.ndarray):
    """Flat text matrix: instance id followed by embedding components."""
    mat = np.column_stack([np.asarray(ids, dtype=float), embeddings])
    np.savetxt(path, mat, fmt="%.8g")


def retrieval_report(rankings: list[RankingResult],
                     query_records: list[SampleRecord],
                     gallery_records: list[SampleRecord],
                     out_png: str, out_txt: str, top_k: int = 5,
                     thumb: int = 96):
    """Per-query grid: query image + top-k gallery images with similarity
    scores; the correct match gets a highlighted border."""
    gallery_by_id = {r.instance_id: r for r in gallery_records}
    rows = len(rankings)
    cols = top_k + 1
    grid = Image.new("RGB", (cols * thumb, rows * thumb), (255, 255, 255))
    lines = ["query_id\trank\tgallery_id\tscore\tcorrect"]

    for row, (ranking, qrec) in enumerate(zip(rankings, query_records)):
        tile = Image.open(qrec.image_ref).convert("RGB").resize((thumb, thumb))
        grid.paste(tile, (0, row * thumb))
        for col in range(min(top_k, len(ranking.gallery_ids))):
            gid = int(ranking.gallery_ids[col])
            score = 1.0 - float(ranking.distances[col])
            correct = gid == ranking.query_id
            grec = gallery_by_id[gid]
            tile = Image.open(grec.image_ref).convert("RGB").resize((thumb, thumb))
            if correct:
                d = ImageDraw.Draw(tile)
                for w in range(3):
                    d.rectangle([w, w, thumb - 1 - w, thumb - 1 - w],
                                outline=(0, 220, 0))
            grid.paste(tile, ((col + 1) * thumb, row * thumb))
            lines.append(f"{ranking.query_id}\t{col + 1}\t{gid}\t{score:.4f}"
                         f"\t{int(correct)}")

    grid.save(out_png)
    with open(out_txt, "w") as f:
        f.write("\n".join(lines) + "\n")
