"""Per-class EMA approximation of intra-class embedding variance.

Each class keeps a running estimate v of mean(1 - CCS), updated once
per training iteration with momentum alpha that ramps linearly from
alpha_start to alpha_end over the run.  Classes whose v sits one
standard deviation or more below the mean receive loss weight 0; the
weight ramps linearly up to 1 at the mean, via a z-score clamped to
[-1, 0] plus one.  On a unit-Gaussian v distribution this zeroes about
16% of classes.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, StructuralError

SIGMA_FLOOR = 1e-12


@dataclass
class VarianceTracker:
    v: np.ndarray
    step: int = 0
    total_steps: int = 1
    alpha_start: float = 0.9
    alpha_end: float = 1.0

    @property
    def num_classes(self):
        return self.v.shape[0]


@dataclass
class WeightVector:
    w: np.ndarray
    mu: float
    sigma: float


def init_tracker(num_classes, total_steps, alpha_start=0.9, alpha_end=1.0,
                 dtype=np.float64):
    """All classes start at v = 1.0 so every sample contributes equally
    at the beginning of training."""
    if total_steps <= 0:
        raise DomainError("total_steps must be positive")
    return VarianceTracker(v=np.ones(num_classes, dtype=dtype),
                           total_steps=total_steps,
                           alpha_start=alpha_start, alpha_end=alpha_end)


def alpha_at(tracker):
    """Momentum at the current iteration: linear interpolation from
    alpha_start at step 0 to alpha_end at step total_steps."""
    if tracker.total_steps <= 0:
        raise DomainError("total_steps must be positive")
    frac = min(tracker.step / tracker.total_steps, 1.0)
    return tracker.alpha_start + (tracker.alpha_end - tracker.alpha_start) * frac


def group_ccs_by_class(labels, ccs):
    """Batch (labels, ccs) -> {class: [ccs values]} for update()."""
    grouped = {}
    for label, value in zip(np.asarray(labels), np.asarray(ccs)):
        grouped.setdefault(int(label), []).append(float(value))
    return grouped


def update(tracker, class_ccs):
    """One EMA step from a batch.

    Multiple same-class samples are averaged into a single observation
    before the EMA step, so the fold is independent of within-batch
    ordering.  Classes absent from the batch are untouched.  Mutates and
    returns the tracker; the step counter advances once per call.
    """
    alpha = alpha_at(tracker)
    for label, values in class_ccs.items():
        if not 0 <= label < tracker.num_classes:
            raise StructuralError(
                f"class index {label} outside [0, {tracker.num_classes})")
        obs = float(np.mean([1.0 - v for v in values]))
        tracker.v[label] = alpha * tracker.v[label] + (1.0 - alpha) * obs
    tracker.step += 1
    return tracker


def weights(tracker):
    """Per-class loss weights 1 + clamp((v - mu)/sigma, -1, 0).

    mu and sigma (population) are recomputed from the full v array on
    every call.  If sigma is degenerate (all v equal, e.g. right after
    initialization) every class gets weight 1.
    """
    v = tracker.v
    mu = float(v.mean())
    sigma = float(v.std())
    if sigma < SIGMA_FLOOR:
        return WeightVector(w=np.ones_like(v), mu=mu, sigma=sigma)
    z = (v - mu) / sigma
    w = 1.0 + np.clip(z, -1.0, 0.0)
    return WeightVector(w=w, mu=mu, sigma=sigma)


def export_weights_csv(tracker, path):
    """Write `class_id,v,weight` rows for offline weight-distribution
    analysis."""
    wv = weights(tracker)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("class_id,v,weight\n")
        for c in range(tracker.num_classes):
            fh.write(f"{c},{tracker.v[c]:.9g},{wv.w[c]:.9g}\n")
