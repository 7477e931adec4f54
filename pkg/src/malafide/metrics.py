"""Equal error rate under a fixed score polarity (higher = bona fide)."""

from __future__ import annotations

import numpy as np


def far_frr(bona_scores, spoof_scores, thresholds):
    """FAR(t) = share of spoofs scoring >= t, FRR(t) = share of bona fide scoring < t."""
    bona = np.sort(np.asarray(bona_scores, dtype=np.float64))
    spoof = np.sort(np.asarray(spoof_scores, dtype=np.float64))
    t = np.asarray(thresholds, dtype=np.float64)
    far = (len(spoof) - np.searchsorted(spoof, t, side="left")) / len(spoof)
    frr = np.searchsorted(bona, t, side="left") / len(bona)
    return far, frr


def compute_eer(bona_scores, spoof_scores) -> float:
    """Equal error rate in percent.

    Thresholds sweep the sorted union of all scores plus ``+inf``. The EER is
    read where FAR and FRR cross, interpolating linearly between the two
    adjacent sweep points; an exact crossing takes the lowest such threshold.
    """
    bona = np.asarray(bona_scores, dtype=np.float64).ravel()
    spoof = np.asarray(spoof_scores, dtype=np.float64).ravel()
    if bona.size == 0 or spoof.size == 0:
        raise ValueError("both score lists must be non-empty")
    if not (np.all(np.isfinite(bona)) and np.all(np.isfinite(spoof))):
        raise ValueError("scores must be finite")
    thresholds = np.append(np.unique(np.concatenate([bona, spoof])), np.inf)
    far, frr = far_frr(bona, spoof, thresholds)
    assert np.all(np.diff(far) <= 0) and np.all(np.diff(frr) >= 0)
    gap = far - frr  # +1 at the lowest threshold, -1 at +inf
    k = int(np.argmax(gap <= 0))
    if gap[k] == 0:
        return 100.0 * float(far[k])
    # the two lines cross between sweep points k-1 and k
    alpha = gap[k - 1] / (gap[k - 1] - gap[k])
    eer = far[k - 1] + alpha * (far[k] - far[k - 1])
    return 100.0 * float(eer)
