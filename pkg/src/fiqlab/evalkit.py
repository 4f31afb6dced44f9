"""Verification protocol, ERC curves, correlation statistics, and the
brute-force oracles used to cross-check the training-side estimates.

Conventions (decided defaults, documented rather than tuned):
  - similarity between two samples is the cosine of their backbone
    embeddings;
  - the quality of a pair is the minimum of its two sample scores;
  - the acceptance threshold is calibrated once on the unfiltered
    non-mated set and held fixed across rejection rates;
  - the rejection grid is {0, step, ..., 0.95} and the reported AUC is
    the unnormalized trapezoidal integral over that grid.
"""

import itertools
import time
from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from . import variance
from .errors import (
    DomainError,
    StructuralError,
    UndefinedCorrelationError,
    UndefinedFnmrError,
)
from .rngstreams import T_PAIRS, rng_for


@dataclass(frozen=True)
class VerificationPair:
    index_a: int
    index_b: int
    genuine: bool


@dataclass
class ErcCurve:
    fmr_target: float
    threshold: float
    points: np.ndarray  # (k, 2) columns reject_rate, fnmr
    auc: float


# ---------------------------------------------------------------------------
# pair protocol

def gen_pairs(dataset, rng=None, max_per_class=None, nonmated_count=0,
              seed=0):
    """Enumerate mated pairs (up to ``max_per_class`` per class) plus
    ``nonmated_count`` random cross-class pairs.  Deterministic for a
    fixed seed; classes with fewer than two samples simply contribute no
    mated pairs.
    """
    if rng is None:
        rng = rng_for(seed, T_PAIRS)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    pairs = []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(labels == c)
        combos = list(itertools.combinations(members.tolist(), 2))
        if max_per_class is not None and len(combos) > max_per_class:
            picks = rng.choice(len(combos), size=max_per_class, replace=False)
            combos = [combos[int(i)] for i in sorted(picks)]
        pairs.extend(VerificationPair(a, b, True) for a, b in combos)

    n = labels.shape[0]
    seen = set()
    while len(seen) < nonmated_count:
        a, b = (int(x) for x in rng.integers(0, n, 2))
        if a == b or labels[a] == labels[b]:
            continue
        key = (min(a, b), max(a, b))
        if key in seen:
            continue
        seen.add(key)
        pairs.append(VerificationPair(key[0], key[1], False))
    return pairs


def embed_dataset(model, images, batch_size=256):
    """Unit-norm embeddings for every image, computed in batches."""
    chunks = []
    for start in range(0, images.shape[0], batch_size):
        emb, _ = bb.forward(model, images[start:start + batch_size])
        chunks.append(emb)
    return np.concatenate(chunks, axis=0)


def pair_similarities(embeddings, pairs):
    """Cosine similarity per pair (embeddings assumed row-unit-norm)."""
    idx_a = np.array([p.index_a for p in pairs])
    idx_b = np.array([p.index_b for p in pairs])
    return np.sum(embeddings[idx_a] * embeddings[idx_b], axis=1)


# ---------------------------------------------------------------------------
# threshold calibration and error rates

def fmr_threshold(nonmated_sims, fmr_target):
    """Similarity threshold realizing at most ``fmr_target`` on the
    calibration set.

    With k = floor(fmr_target * n) the threshold is placed halfway
    between the k-th and (k+1)-th largest similarity, accepting exactly
    the k highest.  When those two coincide the threshold moves just
    above the tied value, so ties go to rejection and the realized FMR
    never exceeds the target.
    """
    sims = np.sort(np.asarray(nonmated_sims, dtype=np.float64))[::-1]
    n = sims.shape[0]
    if n == 0:
        raise DomainError("cannot calibrate a threshold on no similarities")
    if not 0.0 < fmr_target < 1.0:
        raise DomainError("fmr_target must lie in (0, 1)")
    k = int(np.floor(fmr_target * n))
    if k <= 0:
        gap = (sims[0] - sims[1]) / 2.0 if n > 1 else 1.0
        return float(sims[0] + max(gap, 1e-9))
    if k >= n:
        return float(sims[-1] - 1.0)
    upper, lower = sims[k - 1], sims[k]
    if upper > lower:
        return float((upper + lower) / 2.0)
    # Tie across the cut: reject every similarity equal to the tied value.
    above = sims[sims > upper]
    gap = (above[-1] - upper) / 2.0 if above.size else 1.0
    return float(upper + max(gap, 1e-9))


def fnmr(mated_sims, threshold, keep_mask=None):
    """Fraction of kept mated pairs falling below the threshold."""
    sims = np.asarray(mated_sims)
    if keep_mask is None:
        keep_mask = np.ones(sims.shape[0], dtype=bool)
    keep_mask = np.asarray(keep_mask)
    if keep_mask.shape != sims.shape:
        raise StructuralError("keep mask length does not match similarities")
    kept = sims[keep_mask]
    if kept.size == 0:
        raise UndefinedFnmrError("all mated pairs rejected")
    return float(np.mean(kept < threshold))


def auc(points):
    """Unnormalized trapezoidal integral of (x, y) samples with strictly
    increasing x."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise DomainError("need at least two points for a trapezoidal AUC")
    x, y = pts[:, 0], pts[:, 1]
    if np.any(np.diff(x) <= 0):
        raise DomainError("x coordinates must be strictly increasing")
    return float(np.trapezoid(y, x))


def erc(pairs, sims, quality_scores, fmr_target, grid_step=0.01,
        max_reject=0.95):
    """Error-versus-rejection curve at a fixed FMR.

    For each rejection rate r on the grid, the floor(r * P) pairs with
    the lowest pair quality (min of the two sample scores, ties broken
    by sample indices) are dropped from the full pair set and the FNMR
    of the surviving mated pairs is recomputed at the fixed threshold.
    The curve is truncated at the first r where no mated pair survives.
    """
    sims = np.asarray(sims, dtype=np.float64)
    scores = np.asarray(quality_scores, dtype=np.float64)
    if sims.shape[0] != len(pairs):
        raise StructuralError("one similarity per pair required")
    if not 0.0 < grid_step < 1.0:
        raise DomainError("grid_step must lie in (0, 1)")

    genuine = np.array([p.genuine for p in pairs])
    if not genuine.any():
        raise DomainError("pair set contains no mated pairs")
    if genuine.all():
        raise DomainError("pair set contains no non-mated pairs to "
                          "calibrate the threshold")
    threshold = fmr_threshold(sims[~genuine], fmr_target)

    idx_a = np.array([p.index_a for p in pairs])
    idx_b = np.array([p.index_b for p in pairs])
    pair_quality = np.minimum(scores[idx_a], scores[idx_b])
    order = np.lexsort((idx_b, idx_a, pair_quality))

    total = len(pairs)
    points = []
    n_grid = int(np.floor(max_reject / grid_step + 1e-9))
    for k in range(n_grid + 1):
        r = k * grid_step
        n_drop = int(np.floor(r * total + 1e-9))
        survivors = order[n_drop:]
        kept_mated = survivors[genuine[survivors]]
        if kept_mated.size == 0:
            break
        value = float(np.mean(sims[kept_mated] < threshold))
        points.append((r, value))

    if len(points) < 2:
        raise UndefinedFnmrError(
            "curve truncated before two grid points; no AUC")
    pts = np.asarray(points)
    return ErcCurve(fmr_target=fmr_target, threshold=threshold, points=pts,
                    auc=auc(pts))


# ---------------------------------------------------------------------------
# correlation statistics

def pearson(a, b):
    """Sample Pearson correlation coefficient."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.shape[0] < 2:
        raise DomainError("pearson needs two equal-length sequences (n >= 2)")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0.0:
        raise UndefinedCorrelationError("constant input sequence")
    return float(np.clip((xc * yc).sum() / denom, -1.0, 1.0))


def _ranks(values):
    """Average ranks (1-based) with ties sharing their mean rank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.shape[0], dtype=np.float64)
    i = 0
    while i < values.shape[0]:
        j = i
        while j + 1 < values.shape[0] and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(a, b):
    """Pearson correlation of (tie-averaged) ranks."""
    return pearson(_ranks(a), _ranks(b))


def ccs_dist(snapshot_prev, snapshot_cur):
    """Mean absolute per-sample change of CCS between two epoch
    snapshots of the same tracked sample set."""
    prev = np.asarray(snapshot_prev, dtype=np.float64)
    cur = np.asarray(snapshot_cur, dtype=np.float64)
    if prev.shape != cur.shape or prev.ndim != 1 or prev.shape[0] < 1:
        raise StructuralError("snapshots must be equal-length 1-D arrays")
    return float(np.mean(np.abs(cur - prev)))


# ---------------------------------------------------------------------------
# brute-force oracles

def oracle_variance(dataset, model, batch_size=256):
    """Exact per-class intra-class embedding variance: the mean squared
    distance of a class's embeddings from their centroid.  No
    approximation; this is the reference the EMA tracker is checked
    against.
    """
    emb = embed_dataset(model, dataset.images, batch_size=batch_size)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    out = np.zeros(dataset.num_classes, dtype=np.float64)
    for c in range(dataset.num_classes):
        rows = emb[labels == c].astype(np.float64)
        mu = rows.mean(axis=0)
        out[c] = float(np.mean(np.sum((rows - mu) ** 2, axis=1)))
    return out


@dataclass
class CostProbeReport:
    ema_step_cost: float
    naive_step_cost: float
    ratio: float
    ema_v: np.ndarray
    naive_var: np.ndarray


def tracker_cost_probe(dataset, model, tracker, batch_size=64, repeats=5):
    """Wall-clock comparison of one EMA tracker iteration against a
    full-dataset recomputation of the exact variance.

    The EMA path times what the tracker adds to a training iteration
    whose batch CCS values are already in hand: grouping by class plus
    one EMA update.  The naive path times oracle_variance over the whole
    dataset.  Returns the per-iteration costs, their ratio, and both
    variance estimates for semantic comparison.
    """
    rng = rng_for(0, T_PAIRS, 99)
    idx = rng.integers(0, dataset.num_samples, batch_size)
    emb = embed_dataset(model, dataset.images[idx])
    labels = np.asarray(dataset.labels, dtype=np.int64)[idx]
    # CCS against the per-class centroid direction stands in for the
    # prototype cosine; the probe measures cost, not training accuracy.
    full = oracle_variance(dataset, model)  # warm cache, discarded
    del full
    centroids = np.zeros((dataset.num_classes, model.embed_dim))
    all_emb = embed_dataset(model, dataset.images)
    all_labels = np.asarray(dataset.labels, dtype=np.int64)
    for c in range(dataset.num_classes):
        mu = all_emb[all_labels == c].mean(axis=0)
        centroids[c] = mu / max(np.linalg.norm(mu), 1e-12)
    ccs = np.sum(emb * centroids[labels], axis=1)

    ema_times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        variance.update(tracker, variance.group_ccs_by_class(labels, ccs))
        ema_times.append(time.perf_counter() - t0)

    naive_times = []
    naive_var = None
    for _ in range(max(2, repeats // 2)):
        t0 = time.perf_counter()
        naive_var = oracle_variance(dataset, model)
        naive_times.append(time.perf_counter() - t0)

    ema_cost = float(min(ema_times))
    naive_cost = float(min(naive_times))
    ratio = naive_cost / max(ema_cost, 1e-12)
    return CostProbeReport(ema_step_cost=ema_cost, naive_step_cost=naive_cost,
                           ratio=ratio, ema_v=tracker.v.copy(),
                           naive_var=naive_var)


# ---------------------------------------------------------------------------
# csv export

def write_curve_csv(curve, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("reject_rate,fnmr\n")
        for r, value in curve.points:
            fh.write(f"{r:.9g},{value:.9g}\n")


def write_auc_csv(rows, path):
    """rows: iterable of (method, fmr, auc)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("method,fmr,auc\n")
        for method, fmr, value in rows:
            fh.write(f"{method},{fmr:.9g},{value:.9g}\n")


def write_pairs_csv(pairs, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("idx_a,idx_b,genuine\n")
        for p in pairs:
            fh.write(f"{p.index_a},{p.index_b},{int(p.genuine)}\n")
