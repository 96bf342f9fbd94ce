"""Brain geometry graph construction and Chebyshev spectral filtering."""

from dataclasses import dataclass

import numpy as np

from mvgcn.errors import DegenerateGraphError, InvalidInputError
from mvgcn.numerics import as_matrix, check_symmetric, sym_eig

MEAN_DISTANCE = "mean_distance"


@dataclass(frozen=True)
class RoiAtlas:
    """Named ROIs with 3-D centre coordinates (mm)."""

    names: tuple
    coords: np.ndarray

    def __post_init__(self):
        names = tuple(str(x) for x in self.names)
        coords = np.array(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise InvalidInputError(f"coords must be n x 3, got shape {coords.shape}")
        if len(names) != coords.shape[0]:
            raise InvalidInputError("names and coords disagree on n")
        if len(names) < 2:
            raise InvalidInputError("an atlas needs at least 2 ROIs")
        if len(set(names)) != len(names):
            raise InvalidInputError("ROI names must be unique")
        if not np.all(np.isfinite(coords)):
            raise InvalidInputError("ROI coordinates must be finite")
        coords.setflags(write=False)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "coords", coords)

    @property
    def n(self):
        return len(self.names)


@dataclass(frozen=True)
class BrainGeometryGraph:
    adjacency: np.ndarray
    knn_k: int
    sigma: float

    @property
    def n(self):
        return self.adjacency.shape[0]

    @property
    def edge_count(self):
        return int(np.count_nonzero(np.triu(self.adjacency, 1)))


@dataclass(frozen=True)
class SpectralOperator:
    laplacian: np.ndarray
    scaled_laplacian: np.ndarray
    lambda_max: float

    @property
    def n(self):
        return self.laplacian.shape[0]


@dataclass(frozen=True)
class ChebyshevStack:
    """``basis[p]`` holds T_p(L~) x, shape (s, n, F_in)."""

    basis: np.ndarray

    @property
    def order(self):
        return self.basis.shape[0]


def gaussian_similarity(vi, vj, sigma):
    if not sigma > 0:
        raise InvalidInputError(f"sigma must be positive, got {sigma}")
    diff = np.asarray(vi, dtype=np.float64) - np.asarray(vj, dtype=np.float64)
    return float(np.exp(-np.dot(diff, diff) / (2.0 * sigma * sigma)))


def _squared_distances(coords):
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sum(diff * diff, axis=-1)


def mean_pairwise_distance(coords):
    iu = np.triu_indices(coords.shape[0], 1)
    return float(np.mean(np.sqrt(_squared_distances(coords)[iu])))


def build_bgg(atlas, k, sigma=MEAN_DISTANCE):
    """K-NN graph over ROI centres with Gaussian edge weights.

    Vertices i and j are joined when either is among the other's ``k`` nearest
    neighbours. Ties at rank ``k`` go to the smaller vertex index.

    Parameters
    ----------
    atlas : RoiAtlas
    k : int
        Neighbour count, ``1 <= k < n``.
    sigma : float or "mean_distance"
        Gaussian bandwidth, or the policy that sets it to the mean pairwise
        Euclidean distance between ROI centres.
    """
    n = atlas.n
    if not 1 <= k < n:
        raise InvalidInputError(f"k must satisfy 1 <= k < n={n}, got {k}")
    if isinstance(sigma, str):
        if sigma != MEAN_DISTANCE:
            raise InvalidInputError(f"unknown sigma policy {sigma!r}")
        sigma = mean_pairwise_distance(atlas.coords)
        if sigma <= 0:
            raise InvalidInputError("all ROI centres coincide; mean-distance sigma is zero")
    sigma = float(sigma)
    if not sigma > 0:
        raise InvalidInputError(f"sigma must be positive, got {sigma}")

    d2 = _squared_distances(atlas.coords)
    ranked = d2.copy()
    np.fill_diagonal(ranked, np.inf)
    # stable sort keeps index order among equal distances
    nearest = np.argsort(ranked, axis=1, kind="stable")[:, :k]
    knn = np.zeros((n, n), dtype=bool)
    knn[np.repeat(np.arange(n), k), nearest.ravel()] = True
    mask = knn | knn.T
    np.fill_diagonal(mask, False)
    weights = np.exp(-d2 / (2.0 * sigma * sigma))
    adjacency = np.where(mask, weights, 0.0)
    return BrainGeometryGraph(adjacency=adjacency, knn_k=int(k), sigma=sigma)


def normalized_laplacian(adjacency):
    """``I - D^-1/2 A D^-1/2``; isolated vertices get ``L_ii = 1``."""
    a = as_matrix(adjacency, "adjacency")
    check_symmetric(a, "adjacency")
    if np.any(a < 0):
        raise InvalidInputError("adjacency has negative entries")
    if np.any(np.diag(a) != 0):
        raise InvalidInputError("adjacency must have a zero diagonal")
    degree = a.sum(axis=1)
    inv_sqrt = np.zeros_like(degree)
    np.divide(1.0, np.sqrt(degree), out=inv_sqrt, where=degree > 0)
    lap = np.eye(a.shape[0]) - inv_sqrt[:, None] * a * inv_sqrt[None, :]
    return 0.5 * (lap + lap.T)


def build_spectral_operator(bgg):
    """Normalized Laplacian, its exact largest eigenvalue, and the scaled Laplacian.

    Raises
    ------
    DegenerateGraphError
        For a graph without edges. With isolated vertices mapped to ``L_ii = 1``
        such a graph has ``L = I``, so the check cannot rely on lambda_max alone.
    """
    if not np.any(bgg.adjacency):
        raise DegenerateGraphError("graph has no edges")
    lap = normalized_laplacian(bgg.adjacency)
    eigenvalues, _ = sym_eig(lap)
    lambda_max = float(eigenvalues[-1])
    if lambda_max < 1e-12:
        raise DegenerateGraphError("graph has no edges; lambda_max is zero")
    scaled = (2.0 / lambda_max) * lap - np.eye(lap.shape[0])
    return SpectralOperator(laplacian=lap, scaled_laplacian=scaled, lambda_max=lambda_max)


def chebyshev_apply(op, x, s):
    """Chebyshev basis T_p(L~) x for p < s via the three-term recurrence."""
    if s < 1:
        raise InvalidInputError(f"Chebyshev order s must be >= 1, got {s}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] != op.n:
        raise InvalidInputError(f"x must have {op.n} rows, got shape {x.shape}")
    lt = op.scaled_laplacian
    basis = np.empty((s,) + x.shape)
    basis[0] = x
    if s > 1:
        basis[1] = lt @ x
    for p in range(2, s):
        basis[p] = 2.0 * (lt @ basis[p - 1]) - basis[p - 2]
    return ChebyshevStack(basis=basis)
