"""Detection metrics: AUROC, FPR@TPR, and ID classification accuracy.

Score convention throughout: higher score means more in-distribution.
Callers holding a low-is-ID detector negate its scores before calling in.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import rankdata


def _check_scores(scores, name: str) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D vector, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError(f"{name} contains non-finite entries")
    return s


def auroc(id_scores, ood_scores) -> float:
    """P(S_id > S_ood) + 0.5 * P(S_id = S_ood) over all ID x OoD pairs.

    Computed via rank statistics in O(n log n); with average ranks the
    numerator is an exact multiple of 0.5, so the result equals the O(n^2)
    pairwise count bit-for-bit.
    """
    s_id = _check_scores(id_scores, "id_scores")
    s_ood = _check_scores(ood_scores, "ood_scores")
    n_id, n_ood = s_id.size, s_ood.size
    ranks = rankdata(np.concatenate([s_id, s_ood]), method="average")
    # Mann-Whitney U for the ID sample: wins + half-ties.
    u = float(np.sum(ranks[:n_id])) - n_id * (n_id + 1) / 2.0
    return u / (n_id * n_ood)


def fpr_at_tpr(id_scores, ood_scores, tpr_target: float = 0.95) -> float:
    """OoD false-positive rate at the loosest threshold keeping TPR >= target.

    The threshold T* is the largest score value such that the fraction of ID
    scores >= T* is at least ``tpr_target``; returns the fraction of OoD
    scores >= T*. Empirical step ROC, no interpolation.
    """
    s_id = _check_scores(id_scores, "id_scores")
    s_ood = _check_scores(ood_scores, "ood_scores")
    if not (0.0 < tpr_target <= 1.0):
        raise ValueError(f"tpr_target must be in (0, 1], got {tpr_target}")
    n_id = s_id.size
    # Smallest k with k/n >= target, robust to float rounding of target*n.
    k = math.ceil(tpr_target * n_id)
    while k > 1 and (k - 1) / n_id >= tpr_target:
        k -= 1
    while k / n_id < tpr_target:
        k += 1
    threshold = np.sort(s_id)[::-1][k - 1]
    return float(np.mean(s_ood >= threshold))


def accuracy(logit_rows, class_labels) -> float:
    """Fraction of rows whose argmax logit equals the label.

    Argmax ties break to the lowest class index.
    """
    logits = np.asarray(logit_rows, dtype=np.float64)
    labels = np.asarray(class_labels)
    if logits.ndim != 2:
        raise ValueError(f"logit_rows must be 2-D, got shape {logits.shape}")
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ValueError(
            f"class_labels shape {labels.shape} does not match logit rows {logits.shape[0]}"
        )
    return float(np.mean(np.argmax(logits, axis=1) == labels))
