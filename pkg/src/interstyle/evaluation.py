"""Retrieval evaluation (mAP / Rank-1) and style-space diagnostics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .stylize import (StylizerSpec, channel_style, draw_style, isg_intervals,
                      style_distribution, styles_after_draw)


@dataclass
class RetrievalSplit:
    query_features: np.ndarray     # [Q, d] unit rows
    query_labels: np.ndarray       # [Q]
    gallery_features: np.ndarray   # [G, d] unit rows
    gallery_labels: np.ndarray     # [G]
    query_ids: Optional[np.ndarray] = None     # instance ids; matches are
    gallery_ids: Optional[np.ndarray] = None   # dropped from that ranking


def self_retrieval_split(features: np.ndarray, labels: np.ndarray) -> RetrievalSplit:
    """Every image queries all the others (self excluded by instance id)."""
    ids = np.arange(features.shape[0])
    return RetrievalSplit(query_features=features, query_labels=labels,
                          gallery_features=features, gallery_labels=labels,
                          query_ids=ids, gallery_ids=ids)


def average_precision(relevance: np.ndarray) -> float:
    """AP of one ranked 0/1 relevance vector: mean over the i-th relevant
    item (1-indexed) of i / rank_i."""
    ranks = np.flatnonzero(relevance) + 1
    if ranks.size == 0:
        return float("nan")
    return float(np.mean(np.arange(1, ranks.size + 1) / ranks))


def evaluate(split: RetrievalSplit) -> dict:
    """Rank the gallery per query by cosine similarity (ties by gallery
    index) and report mAP, Rank-1, and how many queries had no match."""
    q = np.asarray(split.query_features)
    g = np.asarray(split.gallery_features)
    sims = q @ g.T
    excluded = np.zeros(q.shape[0], dtype=np.int64)
    if split.query_ids is not None and split.gallery_ids is not None:
        drop = np.asarray(split.query_ids)[:, None] == np.asarray(split.gallery_ids)
        sims = np.where(drop, -np.inf, sims)
        excluded = drop.sum(axis=1)
    if excluded.max() == excluded.min():
        return _evaluate_uniform(sims, split, int(excluded[0]))
    return _evaluate_rowwise(sims, split)


def _finish(aps: list, hits: list, skipped: int) -> dict:
    if not aps:
        raise ConfigurationError("no query had a relevant gallery item")
    return {
        "mAP": float(np.mean(aps)),
        "rank1": float(np.mean(hits)),
        "skipped_queries": skipped,
    }


def _evaluate_uniform(sims: np.ndarray, split: RetrievalSplit,
                      n_excluded: int) -> dict:
    """Vectorized path: the same number of exclusions in every row, so the
    -inf entries all sort to a uniform tail that can be truncated."""
    order = np.argsort(-sims, axis=1, kind="stable")
    if n_excluded:
        order = order[:, :-n_excluded]
    relevant = np.asarray(split.gallery_labels)[order] == \
        np.asarray(split.query_labels)[:, None]
    n_rel = relevant.sum(axis=1)
    ranks = np.arange(1, relevant.shape[1] + 1)
    precision_at_hit = relevant * (np.cumsum(relevant, axis=1) / ranks)
    valid = n_rel > 0
    aps = precision_at_hit[valid].sum(axis=1) / n_rel[valid]
    return _finish(list(aps), list(relevant[valid, 0]), int((~valid).sum()))


def _evaluate_rowwise(sims: np.ndarray, split: RetrievalSplit) -> dict:
    aps = []
    hits = []
    skipped = 0
    for i in range(sims.shape[0]):
        keep = np.isfinite(sims[i])
        order = np.argsort(-sims[i, keep], kind="stable")
        relevant = (np.asarray(split.gallery_labels)[keep]
                    == split.query_labels[i])[order]
        if not relevant.any():
            skipped += 1
            continue
        aps.append(average_precision(relevant))
        hits.append(bool(relevant[0]))
    return _finish(aps, hits, skipped)


# ---------------------------------------------------------------------------
# style diagnostics: how each operator's synthesized styles relate to the
# originals, exported as a CSV of [mu; sigma] style vectors plus a summary.


def _per_draw_pearson(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Column-wise Pearson r between two [B, C] matrices."""
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    denom = np.sqrt((a * a).sum(axis=0) * (b * b).sum(axis=0))
    denom = np.maximum(denom, 1e-12)
    return (a * b).sum(axis=0) / denom


def style_diagnostics(feature_maps: np.ndarray, specs: dict[str, StylizerSpec],
                      n_draws: int = 10000, seed: int = 0,
                      csv_draws: int = 10) -> tuple[list[dict], dict]:
    """Draw styles repeatedly on one fixed batch of feature maps.

    Returns (records, summary): records carry [mu; sigma] per sample for
    the original batch plus the first ``csv_draws`` draws per method;
    summary reports, per method, the signed and absolute mean Pearson
    correlation to the original styles, coverage of the isg sampling
    intervals, and the fraction of styles inside the original min-max box.
    """
    eps = next(iter(specs.values())).eps if specs else 1e-6
    mu, sigma = channel_style(np.asarray(feature_maps, dtype=np.float64), eps)
    dist = style_distribution(mu, sigma)

    records = [{"method": "original", "sample": i,
                "mu": mu[i].copy(), "sigma": sigma[i].copy()}
               for i in range(mu.shape[0])]
    summary: dict[str, dict] = {
        "original": {"mean_corr": 1.0, "mean_abs_corr": 1.0}
    }

    # numerical slack: convex mixes can overshoot the exact box by rounding
    box_tol = 1e-5
    box_mu = (mu.min(axis=0) - box_tol, mu.max(axis=0) + box_tol)
    box_sigma = (sigma.min(axis=0) - box_tol, sigma.max(axis=0) + box_tol)

    for name, spec in specs.items():
        if spec.method == "none":
            continue
        rng = np.random.default_rng(seed if spec.seed is None else spec.seed)
        corr_sum = 0.0
        abs_corr_sum = 0.0
        inside = 0
        total_entries = 0
        lo_b = np.full_like(mu[0], np.inf)
        hi_b = np.full_like(mu[0], -np.inf)
        lo_g = np.full_like(sigma[0], np.inf)
        hi_g = np.full_like(sigma[0], -np.inf)
        draws_done = 0
        for d in range(n_draws):
            draw = draw_style(feature_maps, spec, rng)
            if draw is None:
                continue
            beta, gamma = styles_after_draw(mu, sigma, spec, draw)
            if d < csv_draws:
                for i in range(beta.shape[0]):
                    records.append({"method": name, "sample": d * beta.shape[0] + i,
                                    "mu": beta[i].copy(), "sigma": gamma[i].copy()})
            r_mu = _per_draw_pearson(beta, mu)
            r_sigma = _per_draw_pearson(gamma, sigma)
            corr_sum += float(np.mean(r_mu) + np.mean(r_sigma)) / 2.0
            abs_corr_sum += float(np.mean(np.abs(r_mu)) + np.mean(np.abs(r_sigma))) / 2.0
            inside += int(np.sum((beta >= box_mu[0]) & (beta <= box_mu[1])))
            inside += int(np.sum((gamma >= box_sigma[0]) & (gamma <= box_sigma[1])))
            total_entries += 2 * beta.size
            lo_b = np.minimum(lo_b, beta.min(axis=0))
            hi_b = np.maximum(hi_b, beta.max(axis=0))
            lo_g = np.minimum(lo_g, gamma.min(axis=0))
            hi_g = np.maximum(hi_g, gamma.max(axis=0))
            draws_done += 1
        beta_lo, beta_hi, gamma_lo, gamma_hi = isg_intervals(dist, spec.rho or 3.0)
        width_b = np.maximum(beta_hi - beta_lo, 1e-12)
        width_g = np.maximum(gamma_hi - gamma_lo, 1e-12)
        coverage = float(np.mean(np.concatenate([
            np.clip((hi_b - lo_b) / width_b, 0.0, None),
            np.clip((hi_g - lo_g) / width_g, 0.0, None)])))
        summary[name] = {
            "method": spec.method,
            "draws": draws_done,
            "mean_corr": corr_sum / max(draws_done, 1),
            "mean_abs_corr": abs_corr_sum / max(draws_done, 1),
            "coverage": coverage,
            "box_containment": inside / max(total_entries, 1),
        }
    return records, summary


def write_style_csv(records: list[dict], path):
    num_channels = records[0]["mu"].shape[0]
    header = (["method", "sample"]
              + [f"mu_{c + 1}" for c in range(num_channels)]
              + [f"sigma_{c + 1}" for c in range(num_channels)])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for rec in records:
            writer.writerow([rec["method"], rec["sample"]]
                            + [repr(float(v)) for v in rec["mu"]]
                            + [repr(float(v)) for v in rec["sigma"]])


def write_style_summary(summary: dict, path):
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
