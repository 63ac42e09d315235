"""Retrieval metrics, sharpness, and loss-landscape probes.

Ranking is by descending dot product with ties broken by ascending
gallery index, everywhere, including inside candidate subsets (the
global order restricted to the subset). recall_report uses a
rank-of-target computation that avoids materializing full rankings;
rank_gallery is the reference form and the two are cross-checked in
tests. WRF_THREADS (default 1) caps query-chunk parallelism in
recall_report; results are concatenated in order, so the thread count
never changes any number.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError
from .params import ParameterSet
from .perturb import Perturbation, apply_perturbation

_DIR_TAG = 0x51

THREADS_ENV = "WRF_THREADS"


def thread_count() -> int:
    try:
        n = int(os.environ.get(THREADS_ENV, "1"))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer")
    return max(1, n)


@dataclass(frozen=True)
class MetricReport:
    split: str
    recall_at: dict[int, float]
    rmean: float
    recall_subset_at: dict[int, float] | None = None


def _check_embeddings(queries: np.ndarray, gallery: np.ndarray) -> None:
    if queries.ndim != 2 or gallery.ndim != 2 or queries.shape[1] != gallery.shape[1]:
        raise ShapeError(
            f"embedding dims do not match: {queries.shape} vs {gallery.shape}"
        )


def rank_gallery(query_embs: np.ndarray, gallery_embs: np.ndarray) -> np.ndarray:
    """(Q, G) gallery indices per query, best first; ties by ascending index."""
    _check_embeddings(query_embs, gallery_embs)
    scores = query_embs @ gallery_embs.T
    return np.argsort(-scores, axis=1, kind="stable")


def recall_at_k(rankings: np.ndarray, targets: np.ndarray, k: int) -> float:
    if k < 1:
        raise ConfigError(f"K must be >= 1, got {k}")
    if k > rankings.shape[1]:
        raise ConfigError(f"K={k} exceeds gallery size {rankings.shape[1]}")
    hits = (rankings[:, :k] == np.asarray(targets)[:, None]).any(axis=1)
    return float(100.0 * hits.mean())


def recall_subset_at_k(
    rankings: np.ndarray, subsets: np.ndarray, targets: np.ndarray, k: int
) -> float:
    """Recall after restricting each query's ranking to its candidate subset."""
    if not (1 <= k <= subsets.shape[1]):
        raise ConfigError(f"K must lie in [1, subset_size], got {k}")
    targets = np.asarray(targets)
    if not (subsets == targets[:, None]).any(axis=1).all():
        raise DataError("a candidate subset is missing its query's target")
    q, g = rankings.shape
    inv = np.empty_like(rankings)
    np.put_along_axis(inv, rankings, np.broadcast_to(np.arange(g), (q, g)), axis=1)
    member_pos = np.take_along_axis(inv, subsets.astype(np.int64), axis=1)
    target_pos = np.take_along_axis(inv, targets[:, None].astype(np.int64), axis=1)
    subset_rank = 1 + (member_pos < target_pos).sum(axis=1)
    return float(100.0 * (subset_rank <= k).mean())


def target_ranks(query_embs: np.ndarray, gallery_embs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based global rank of each query's target, same tie rule as rank_gallery."""
    _check_embeddings(query_embs, gallery_embs)
    targets = np.asarray(targets, dtype=np.int64)
    scores = query_embs @ gallery_embs.T
    own = np.take_along_axis(scores, targets[:, None], axis=1)
    ahead = (scores > own).sum(axis=1)
    ties = ((scores == own) & (np.arange(scores.shape[1])[None, :] < targets[:, None])).sum(axis=1)
    return (1 + ahead + ties).astype(np.int64)


def subset_target_ranks(
    query_embs: np.ndarray,
    gallery_embs: np.ndarray,
    subsets: np.ndarray,
    targets: np.ndarray,
) -> np.ndarray:
    """1-based rank of the target within its subset, global order preserved."""
    _check_embeddings(query_embs, gallery_embs)
    targets = np.asarray(targets, dtype=np.int64)
    if not (subsets == targets[:, None]).any(axis=1).all():
        raise DataError("a candidate subset is missing its query's target")
    scores = query_embs @ gallery_embs.T
    own = np.take_along_axis(scores, targets[:, None], axis=1)
    sub = np.take_along_axis(scores, subsets.astype(np.int64), axis=1)
    ahead = (sub > own).sum(axis=1)
    ties = ((sub == own) & (subsets < targets[:, None])).sum(axis=1)
    return (1 + ahead + ties).astype(np.int64)


def _chunked(fn: Callable[[slice], np.ndarray], total: int) -> np.ndarray:
    threads = thread_count()
    if threads == 1 or total < 2 * threads:
        return fn(slice(0, total))
    bounds = np.linspace(0, total, threads + 1).astype(int)
    chunks = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return np.concatenate(list(pool.map(fn, chunks)))


def recall_report(
    query_embs: np.ndarray,
    gallery_embs: np.ndarray,
    targets: np.ndarray,
    subsets: np.ndarray | None,
    ks: Sequence[int],
    split: str,
    subset_ks: Sequence[int] = (1,),
) -> MetricReport:
    if not ks:
        raise ConfigError("need at least one K value")
    targets = np.asarray(targets, dtype=np.int64)
    ranks = _chunked(
        lambda s: target_ranks(query_embs[s], gallery_embs, targets[s]),
        len(targets),
    )
    recall_at = {int(k): float(100.0 * (ranks <= k).mean()) for k in ks}
    for k in recall_at:
        if not (1 <= k <= gallery_embs.shape[0]):
            raise ConfigError(f"K={k} outside [1, gallery size]")
    rmean = float(np.mean(list(recall_at.values())))
    recall_subset_at = None
    if subsets is not None:
        sub_ranks = _chunked(
            lambda s: subset_target_ranks(query_embs[s], gallery_embs, subsets[s], targets[s]),
            len(targets),
        )
        recall_subset_at = {
            int(k): float(100.0 * (sub_ranks <= k).mean()) for k in subset_ks
        }
    return MetricReport(split, recall_at, rmean, recall_subset_at)


def cirr_avg(report: MetricReport) -> float:
    """Mean of Recall@5 and Recall_subset@1."""
    if 5 not in report.recall_at:
        raise ConfigError("report lacks Recall@5")
    if not report.recall_subset_at or 1 not in report.recall_subset_at:
        raise ConfigError("report lacks Recall_subset@1")
    return (report.recall_at[5] + report.recall_subset_at[1]) / 2.0


def generalization_gap(train_report: MetricReport, val_report: MetricReport) -> float:
    """Train rmean minus val rmean; both reports must use the same K set."""
    if set(train_report.recall_at) != set(val_report.recall_at):
        raise ConfigError("reports use different K sets")
    return train_report.rmean - val_report.rmean


def sharpness(
    loss_fn: Callable[[ParameterSet], float],
    params: ParameterSet,
    pert: Perturbation,
) -> float:
    """Loss increase under a perturbation: L(theta+delta) - L(theta)."""
    return loss_fn(apply_perturbation(params, pert)) - loss_fn(params)


@dataclass(frozen=True)
class LandscapeCurve:
    direction_id: int
    alphas: np.ndarray
    losses: np.ndarray  # may contain nan/inf where the loss blew up
    scales: dict[str, float]  # per-layer norm each direction was scaled to


def default_alpha_grid(alpha_max: float = 0.1, half_steps: int = 10) -> np.ndarray:
    """Symmetric grid with an exact 0 at the center (21 points by default)."""
    if not (alpha_max > 0 and half_steps >= 1):
        raise ConfigError("need alpha_max > 0 and half_steps >= 1")
    return np.arange(-half_steps, half_steps + 1) * (alpha_max / half_steps)


def _check_alphas(alphas: np.ndarray) -> np.ndarray:
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.ndim != 1 or len(alphas) < 1:
        raise ConfigError("alpha grid must be a 1-d sequence")
    if np.any(np.diff(alphas) <= 0):
        raise ConfigError("alpha grid must be strictly increasing")
    if not np.any(alphas == 0.0):
        raise ConfigError("alpha grid must include 0")
    return alphas


def landscape_probe(
    loss_fn: Callable[[ParameterSet], float],
    params: ParameterSet,
    n_directions: int,
    alphas: Iterable[float],
    seed: int = 0,
) -> list[LandscapeCurve]:
    """Loss slices along seeded random directions, one curve per direction.

    Directions are rescaled per trainable layer to match that layer's
    weight norm, so slices are comparable across checkpoints. A
    non-finite loss is recorded as nan in the curve rather than raised.
    The input params are never modified.
    """
    if n_directions < 1:
        raise ConfigError("n_directions must be >= 1")
    alphas = _check_alphas(alphas)
    curves = []
    for d_id in range(n_directions):
        rng = np.random.default_rng([_DIR_TAG, seed, d_id])
        direction: dict[str, np.ndarray] = {}
        scales: dict[str, float] = {}
        for name in params.trainable_names:
            raw = rng.standard_normal(params[name].shape)
            w_norm = float(np.linalg.norm(params[name]))
            r_norm = float(np.linalg.norm(raw))
            if w_norm < 1e-12 or r_norm < 1e-12:
                direction[name] = np.zeros_like(raw)
                scales[name] = 0.0
            else:
                direction[name] = raw * (w_norm / r_norm)
                scales[name] = w_norm
        losses = np.empty(len(alphas))
        for j, alpha in enumerate(alphas):
            if alpha == 0.0:
                probe = params  # the alpha=0 row is the exact base loss
            else:
                probe = params.copy()
                for name, d_l in direction.items():
                    arr = probe[name]
                    arr += alpha * d_l
            try:
                val = float(loss_fn(probe))
            except NumericError:
                val = float("nan")
            losses[j] = val if np.isfinite(val) else float("nan")
        curves.append(LandscapeCurve(d_id, alphas.copy(), losses, scales))
    return curves


def flatness_score(curves: Sequence[LandscapeCurve], alpha: float = 0.05) -> float:
    """Mean over directions of loss(alpha) - loss(0)."""
    if not curves:
        raise ConfigError("need at least one curve")
    increases = []
    for curve in curves:
        at = int(np.argmin(np.abs(curve.alphas - alpha)))
        if abs(curve.alphas[at] - alpha) > 1e-9:
            raise ConfigError(f"alpha={alpha} not on the probe grid")
        zero = int(np.argmin(np.abs(curve.alphas)))
        increases.append(curve.losses[at] - curve.losses[zero])
    return float(np.mean(increases))


def landscape_to_csv(curves: Sequence[LandscapeCurve], path: str | os.PathLike) -> None:
    lines = ["direction_id,alpha,loss"]
    for curve in curves:
        for alpha, val in zip(curve.alphas, curve.losses):
            lines.append(f"{curve.direction_id},{repr(float(alpha))},{repr(float(val))}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
