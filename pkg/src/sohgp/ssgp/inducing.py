"""Operating-point inducing set chosen by k-means."""

from dataclasses import dataclass

import numpy as np
from sklearn.cluster import KMeans


@dataclass(frozen=True)
class InducingSet:
    points: np.ndarray
    fallback: bool = False

    def __len__(self):
        return self.points.shape[0]


def choose_inducing_points(steps, k=20, seed=0, max_iter=100):
    """Pick ``k`` representative operating points from normalised (I, T, c) rows.

    With ``k`` or fewer distinct rows the distinct rows themselves are returned
    (flagged as a fallback when there are strictly fewer than ``k``).
    """
    steps = np.asarray(steps, dtype=float)
    if steps.ndim != 2 or steps.shape[0] == 0:
        raise ValueError("need a non-empty (n, D) array of operating points")
    distinct = np.unique(steps, axis=0)
    if distinct.shape[0] <= k:
        return InducingSet(distinct, fallback=distinct.shape[0] < k)
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=max_iter, random_state=seed)
    km.fit(steps)
    centers = km.cluster_centers_
    order = np.lexsort(centers.T[::-1])
    return InducingSet(np.ascontiguousarray(centers[order]), fallback=False)
