"""Threshold-free detection metrics over two score samples.

Convention throughout: scores are OOD-ness (higher = more anomalous), the
positive class is OOD, and a sample is flagged when its score exceeds the
threshold under test.  Ties are half-counted in AUROC, the standard
Mann-Whitney treatment.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError

_PAIR_COUNT_LIMIT = 10**6


def _as_scores(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ContractError(f"{name} score list is empty")
    if not np.isfinite(arr).all():
        raise ContractError(f"{name} contains non-finite scores")
    return arr


def auroc(id_scores, ood_scores) -> float:
    """P(random OOD score > random ID score) + half the tie probability.

    Exact pair counting up to 10^6 pairs, average-rank Mann-Whitney above
    that; the two agree exactly, the split is purely about cost.
    """
    id_s = _as_scores(id_scores, "id")
    ood_s = _as_scores(ood_scores, "ood")
    n, m = id_s.size, ood_s.size
    if n * m <= _PAIR_COUNT_LIMIT:
        wins = np.sum(ood_s[:, None] > id_s[None, :], dtype=np.float64)
        ties = np.sum(ood_s[:, None] == id_s[None, :], dtype=np.float64)
        return float((wins + 0.5 * ties) / (n * m))
    combined = np.concatenate([id_s, ood_s])
    order = np.argsort(combined, kind="mergesort")
    ranks = np.empty(combined.size, dtype=np.float64)
    sorted_vals = combined[order]
    i = 0
    while i < combined.size:
        j = i
        while j + 1 < combined.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[n:].sum()
    return float((rank_sum - m * (m + 1) / 2.0) / (n * m))


def fpr_at_tpr(id_scores, ood_scores, tpr_target: float = 0.95) -> float:
    """False-positive rate at the loosest threshold detecting the target
    fraction of OOD samples.

    The threshold is the largest candidate (unique scores plus a
    below-everything sentinel) at which fraction{ood > t} still reaches
    ``tpr_target``; the return value is fraction{id > t} there.
    """
    id_s = np.sort(_as_scores(id_scores, "id"))
    ood_s = np.sort(_as_scores(ood_scores, "ood"))
    uniq = np.unique(np.concatenate([id_s, ood_s]))
    candidates = np.concatenate([[uniq[0] - 1.0], uniq])
    tpr = (ood_s.size - np.searchsorted(ood_s, candidates, side="right")) / ood_s.size
    feasible = np.nonzero(tpr >= tpr_target)[0]
    t = candidates[feasible[-1]]
    return float(
        (id_s.size - np.searchsorted(id_s, t, side="right")) / id_s.size
    )


def pr_curve(id_scores, ood_scores) -> list:
    """Precision-recall points, one per distinct threshold, descending.

    At each threshold ``t`` the positive prediction is ``score >= t``, so
    the first point is the most conservative and recall never decreases
    along the returned list.
    """
    id_s = np.sort(_as_scores(id_scores, "id"))
    ood_s = np.sort(_as_scores(ood_scores, "ood"))
    thresholds = np.unique(np.concatenate([id_s, ood_s]))[::-1]
    tp = ood_s.size - np.searchsorted(ood_s, thresholds, side="left")
    fp = id_s.size - np.searchsorted(id_s, thresholds, side="left")
    recall = tp / ood_s.size
    precision = tp / np.maximum(tp + fp, 1)
    return [(float(r), float(p)) for r, p in zip(recall, precision)]
