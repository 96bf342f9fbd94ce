"""Dense symmetric linear algebra and seeded randomness.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.
"""

import numpy as np

from mvgcn.errors import ConvergenceError, InvalidInputError

SYMMETRY_TOL = 1e-10

# Fixed start vector seed for power iteration, so results never depend on caller state.
_POWER_START_SEED = 0x5EED


def make_rng(seed):
    """Return a PCG64-backed generator; equal seeds give equal streams on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def as_matrix(m, name="matrix"):
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return a


def check_symmetric(a, name="matrix", tol=SYMMETRY_TOL):
    if a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"{name} must be square, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and np.max(np.abs(a - a.T)) > tol * scale:
        raise InvalidInputError(f"{name} is not symmetric within {tol:g}")


def sym_eig(m, max_sweeps=100):
    """Eigendecomposition of a real symmetric matrix by cyclic Jacobi rotations.

    Parameters
    ----------
    m : array_like, shape (n, n)
        Symmetric matrix.
    max_sweeps : int
        Upper bound on full sweeps over the off-diagonal entries.

    Returns
    -------
    eigenvalues : ndarray, shape (n,)
        Ascending.
    eigenvectors : ndarray, shape (n, n)
        Column ``i`` is the unit eigenvector for ``eigenvalues[i]``.
    """
    a = as_matrix(m)
    check_symmetric(a)
    n = a.shape[0]
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    if n == 0:
        return np.zeros(0), v

    total = np.sqrt(np.sum(a * a))
    threshold = np.finfo(float).eps * total
    for _ in range(max_sweeps):
        off = _off_diagonal_norm(a)
        if off <= threshold:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
                vec_p = v[:, p].copy()
                vec_q = v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q
    else:
        off = _off_diagonal_norm(a)
        if off > 1e-8 * max(total, 1.0):
            raise ConvergenceError("Jacobi sweeps did not converge", float(off))

    values = np.diag(a).copy()
    order = np.argsort(values, kind="stable")
    return values[order], v[:, order]


def _off_diagonal_norm(a):
    off = a - np.diag(np.diag(a))
    return float(np.sqrt(np.sum(off * off)))


def largest_eigenvalue(m, tol=1e-10, max_iter=10000):
    """Largest eigenvalue of a symmetric positive-semidefinite matrix by power iteration.

    Iteration stops once the residual ``||m v - lam v||`` drops to ``tol``; for a
    symmetric matrix that bounds the distance from ``lam`` to the spectrum.

    Raises
    ------
    ConvergenceError
        If ``max_iter`` iterations pass without meeting ``tol``.
    """
    a = as_matrix(m)
    check_symmetric(a)
    if tol <= 0:
        raise InvalidInputError("tol must be positive")
    n = a.shape[0]
    if n == 0:
        raise InvalidInputError("empty matrix has no eigenvalues")
    x = make_rng(_POWER_START_SEED).standard_normal(n)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iter):
        y = a @ x
        lam = float(x @ y)
        if np.linalg.norm(y - lam * x) <= tol:
            return lam
        norm = np.linalg.norm(y)
        if norm == 0.0:
            # x lies in the null space; for a PSD matrix that means m == 0 on span(x)
            return 0.0 if not np.any(a) else _restart(a, tol, max_iter)
        x = y / norm
    raise ConvergenceError(
        f"power iteration did not reach tol={tol:g} in {max_iter} iterations", lam
    )


def _restart(a, tol, max_iter):
    # the fixed start vector landed in the null space of a nonzero matrix
    shifted = a + np.eye(a.shape[0])
    return largest_eigenvalue(shifted, tol, max_iter) - 1.0


def row_l2_normalize(m):
    """Scale every row to unit L2 norm; all-zero rows are returned as zeros."""
    a = np.asarray(m, dtype=np.float64)
    norms = np.sqrt(np.sum(a * a, axis=-1, keepdims=True))
    safe = np.where(norms > 0.0, norms, 1.0)
    return a / safe
