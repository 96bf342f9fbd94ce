"""Ranking and clustering metrics over predicted pair similarities."""

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from mvgcn.errors import InvalidInputError
from mvgcn.numerics import make_rng

UNSCORED = -1.0
GROUPS = ("PD-PD", "HC-HC", "PD-HC")


@dataclass(frozen=True)
class ScoredPair:
    idx_p: int
    idx_q: int
    label: int
    score: float


def auc(scores, labels):
    """Area under the ROC curve in the Mann-Whitney form; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InvalidInputError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)  # average ranks resolve ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_of(scored):
    return auc([s.score for s in scored], [s.label for s in scored])


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    wcss: float
    history: list
    restart: int


def _plus_plus_init(x, k, rng):
    centers = [x[rng.integers(len(x))]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total == 0.0:
            pick = rng.integers(len(x))
        else:
            pick = rng.choice(len(x), p=d2 / total)
        centers.append(x[pick])
        d2 = np.minimum(d2, np.sum((x - x[pick]) ** 2, axis=1))
    return np.array(centers)


def _lloyd(x, centers, max_iter):
    history = []
    assign = None
    for _ in range(max_iter):
        d2 = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new = np.argmin(d2, axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(len(centers)):
            members = x[assign == c]
            if len(members):
                centers[c] = members.mean(axis=0)
        history.append(float(np.sum((x - centers[assign]) ** 2)))
    return assign, centers, history


def kmeans(points, k, seed=0, restarts=10, max_iter=300):
    """Lloyd's algorithm from k-means++ seeds, best of ``restarts`` runs by WCSS.

    Restart ``i`` uses seed ``seed + i``; WCSS ties go to the lower restart.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if not 1 <= k <= len(x):
        raise InvalidInputError(f"k={k} must be between 1 and the number of points ({len(x)})")
    best = None
    for i in range(max(1, restarts)):
        rng = make_rng(seed + i)
        centers = _plus_plus_init(x, k, rng)
        assign, centers, history = _lloyd(x, centers.copy(), max_iter)
        wcss = history[-1]
        if best is None or wcss < best.wcss:
            best = KMeansResult(assign, centers, wcss, history, i)
    return best


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def nmi(assign_a, assign_b):
    """Mutual information over ``sqrt(H(A) H(B))``.

    Identical partitions (up to relabeling) score 1, including the case of two
    single-cluster partitions; otherwise a zero entropy gives 0.
    """
    a = np.asarray(assign_a)
    b = np.asarray(assign_b)
    if a.shape != b.shape:
        raise InvalidInputError(f"length mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        raise InvalidInputError("nmi needs nonempty assignments")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    ha = _entropy(table.sum(axis=1))
    hb = _entropy(table.sum(axis=0))
    if ha == 0.0 or hb == 0.0:
        return 1.0 if ha == hb else 0.0
    joint = table / a.size
    outer = np.outer(joint.sum(axis=1), joint.sum(axis=0))
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / outer[nz])))
    return float(min(max(mi / np.sqrt(ha * hb), 0.0), 1.0))


def similarity_matrix(scored, n):
    """Symmetric N x N match-probability matrix; diagonal 1, unscored entries -1."""
    out = np.full((n, n), UNSCORED)
    np.fill_diagonal(out, 1.0)
    for s in scored:
        out[s.idx_p, s.idx_q] = out[s.idx_q, s.idx_p] = s.score
    return out


def cluster_acquisitions(sim, labels, k=2, seed=0, restarts=10):
    """K-means on similarity-matrix rows, with NMI against the true labels.

    Unscored entries are replaced by the mean of the row's scored off-diagonal
    entries before clustering.

    Returns
    -------
    assignments : ndarray
    score : float
        NMI between ``assignments`` and ``labels``.
    """
    rows = np.array(sim, dtype=np.float64)
    n = rows.shape[0]
    off_diag = ~np.eye(n, dtype=bool)
    for i in range(n):
        scored = (rows[i] != UNSCORED) & off_diag[i]
        fill = rows[i, scored].mean() if scored.any() else 0.5
        rows[i, rows[i] == UNSCORED] = fill
    result = kmeans(rows, k, seed=seed, restarts=restarts)
    return result.assignments, nmi(result.assignments, labels)


@dataclass
class RoiSimilarityReport:
    group: str
    mean_r: np.ndarray
    top_similar: list
    top_dissimilar: list
    pair_count: int


def group_pairs(labels, group, class_names=("PD", "HC")):
    """All unordered pairs whose classes match the ``"A-B"`` group selector."""
    try:
        first, second = (class_names.index(c) for c in group.split("-"))
    except ValueError:
        raise InvalidInputError(f"unknown group {group!r}") from None
    labels = np.asarray(labels)
    p, q = np.triu_indices(len(labels), 1)
    lp, lq = labels[p], labels[q]
    keep = ((lp == first) & (lq == second)) | ((lp == second) & (lq == first))
    return p[keep], q[keep]


def roi_group_report(matching_features, labels, roi_names, group, top_k=10, class_names=("PD", "HC")):
    """Average matching vector over every pair in ``group`` and rank the ROIs.

    Parameters
    ----------
    matching_features : callable
        ``(p_idx, q_idx) -> r`` returning one matching vector per pair.
    """
    p, q = group_pairs(labels, group, class_names)
    if len(p) == 0:
        raise InvalidInputError(f"group {group} has no acquisition pairs")
    if not 1 <= top_k <= len(roi_names):
        raise InvalidInputError(f"top_k must be between 1 and {len(roi_names)}")
    mean_r = np.asarray(matching_features(p, q)).mean(axis=0)
    # stable sort: equal similarities keep atlas order
    order = np.argsort(-mean_r, kind="stable")
    similar = [roi_names[i] for i in order[:top_k]]
    dissimilar = [roi_names[i] for i in order[::-1][:top_k]]
    return RoiSimilarityReport(group, mean_r, similar, dissimilar, len(p))
