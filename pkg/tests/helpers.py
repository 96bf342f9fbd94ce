"""Random instances shared by several test modules."""

import numpy as np

from mvgcn.graph import BrainGeometryGraph, RoiAtlas, build_spectral_operator
from mvgcn.numerics import make_rng


def random_adjacency(rng, n, density=0.5):
    """Symmetric nonnegative weights with a zero diagonal and at least one edge."""
    w = rng.uniform(0.0, 1.0, (n, n)) * (rng.uniform(size=(n, n)) < density)
    a = np.triu(w, 1)
    a[0, 1] = max(a[0, 1], 0.5)
    return a + a.T


def random_operator(rng, n, density=0.5):
    return build_spectral_operator(BrainGeometryGraph(random_adjacency(rng, n, density), 1, 1.0))


def random_atlas(rng, n, scale=100.0):
    return RoiAtlas(tuple(f"R{i}" for i in range(n)), rng.uniform(0.0, scale, (n, 3)))


def random_views(rng, m, n):
    x = rng.uniform(0.0, 1.0, (m, n, n))
    return 0.5 * (x + x.transpose(0, 2, 1))


def seeded(seed):
    return make_rng(seed)
