"""Forward computation for MVGCN and the vector-feature baselines.

The graph-conv input for one acquisition and view is the connectivity matrix
itself (row ``i`` is the feature vector of ROI ``i``, so ``F_in == n``).
Its Chebyshev basis never changes during training, so each acquisition is
cached once as a "flat" array of shape ``(M, n, s * F_in)`` and the graph
convolution becomes ``flat @ theta_flat``.
"""

from dataclasses import dataclass, field

import numpy as np

from mvgcn.errors import InvalidInputError
from mvgcn.graph import chebyshev_apply
from mvgcn.numerics import row_l2_normalize, sym_eig

ACTIVATIONS = ("relu", "identity")
POOL_MODES = ("max", "mean")
NUM_CLASSES = 2
MATCH = 1
NON_MATCH = 0


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _check_choice(value, choices, what):
    if value not in choices:
        raise InvalidInputError(f"{what} must be one of {choices}, got {value!r}")


@dataclass
class ModelParams:
    """Trainable MVGCN state.

    ``theta`` has shape (F_in, F_out, s) and is shared by every view and both
    siamese branches; ``softmax_w`` has shape (C, n).
    """

    theta: np.ndarray
    softmax_w: np.ndarray
    activation: str = "relu"
    pool_mode: str = "max"

    def __post_init__(self):
        _check_choice(self.activation, ACTIVATIONS, "activation")
        _check_choice(self.pool_mode, POOL_MODES, "pool_mode")
        if self.theta.ndim != 3:
            raise InvalidInputError("theta must be F_in x F_out x s")
        if self.softmax_w.ndim != 2 or self.softmax_w.shape[0] != NUM_CLASSES:
            raise InvalidInputError(f"softmax_w must have {NUM_CLASSES} rows")

    @property
    def f_in(self):
        return self.theta.shape[0]

    @property
    def f_out(self):
        return self.theta.shape[1]

    @property
    def order(self):
        return self.theta.shape[2]

    def arrays(self):
        return {"theta": self.theta, "softmax_w": self.softmax_w}

    def copy(self):
        return ModelParams(
            self.theta.copy(), self.softmax_w.copy(), self.activation, self.pool_mode
        )


def init_params(n, f_out, s, rng, activation="relu", pool_mode="max"):
    """Glorot-uniform ``theta`` and a zero softmax layer.

    The fan-in of one output map is ``s * F_in`` basis columns.
    """
    theta = glorot_uniform(rng, (n, f_out, s), fan_in=n * s, fan_out=f_out)
    return ModelParams(theta, np.zeros((NUM_CLASSES, n)), activation, pool_mode)


def flatten_theta(theta):
    f_in, f_out, s = theta.shape
    return theta.transpose(2, 0, 1).reshape(s * f_in, f_out)


def unflatten_theta(flat, f_in, s):
    return flat.reshape(s, f_in, -1).transpose(1, 2, 0)


def acquisition_basis(op, views, s):
    """Chebyshev stacks for every view of one acquisition, flattened to (M, n, s*n)."""
    views = np.asarray(views, dtype=np.float64)
    if views.ndim != 3:
        raise InvalidInputError("views must be an (M, n, n) array")
    flats = []
    for x in views:
        basis = chebyshev_apply(op, x, s).basis  # (s, n, F_in)
        flats.append(basis.transpose(1, 0, 2).reshape(x.shape[0], -1))
    return np.stack(flats)


def activate(h, activation):
    if activation == "relu":
        return np.maximum(h, 0.0)
    return h


def graph_conv_forward(stack, theta, activation="relu"):
    """Output feature maps ``Y[:, j] = sum_i sum_p theta[i, j, p] * basis[p][:, i]``."""
    basis = stack.basis
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 3 or basis.shape[0] != theta.shape[2] or basis.shape[2] != theta.shape[0]:
        raise InvalidInputError(
            f"stack of shape {basis.shape} does not match theta of shape {theta.shape}"
        )
    _check_choice(activation, ACTIVATIONS, "activation")
    h = np.einsum("pni,ijp->nj", basis, theta)
    return activate(h, activation)


@dataclass
class ViewFeatures:
    per_view: np.ndarray
    pooled: np.ndarray
    argmax_view: np.ndarray = None


def view_pool(ys, mode="max"):
    """Element-wise max or mean over views; ties in max go to the lowest view index."""
    _check_choice(mode, POOL_MODES, "pool mode")
    if len(ys) == 0:
        raise InvalidInputError("view_pool needs at least one view")
    stacked = np.asarray(ys, dtype=np.float64)
    if stacked.ndim != 3:
        raise InvalidInputError("all views must be matrices of the same shape")
    if mode == "mean":
        return ViewFeatures(stacked, stacked.mean(axis=0))
    winner = np.argmax(stacked, axis=0)
    pooled = np.take_along_axis(stacked, winner[None], axis=0)[0]
    return ViewFeatures(stacked, pooled, winner)


def pairwise_match(zp, zq):
    """Row-wise inner product of the two row-normalized feature matrices."""
    zp = np.asarray(zp, dtype=np.float64)
    zq = np.asarray(zq, dtype=np.float64)
    if zp.shape != zq.shape:
        raise InvalidInputError(f"shape mismatch {zp.shape} vs {zq.shape}")
    return np.sum(row_l2_normalize(zp) * row_l2_normalize(zq), axis=-1)


def softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_head(r, w):
    r = np.asarray(r, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != r.shape[-1]:
        raise InvalidInputError(f"softmax weights {w.shape} do not match r of length {r.shape[-1]}")
    return softmax(r @ w.T)


@dataclass
class BranchCache:
    """Everything one siamese branch needs for its backward pass."""

    flat: np.ndarray
    pre_activation: np.ndarray
    features: ViewFeatures
    norms: np.ndarray
    zhat: np.ndarray


def encode(flat, params):
    """Graph conv on every view, then view pooling and row normalization."""
    flat = np.asarray(flat)
    if flat.ndim != 3 or flat.shape[2] != params.f_in * params.order:
        raise InvalidInputError(
            f"cached basis of shape {flat.shape} does not match theta {params.theta.shape}"
        )
    h = flat @ flatten_theta(params.theta)
    feats = view_pool(activate(h, params.activation), params.pool_mode)
    z = feats.pooled
    norms = np.sqrt(np.sum(z * z, axis=1))
    zhat = z / np.where(norms > 0.0, norms, 1.0)[:, None]
    return BranchCache(flat, h, feats, norms, zhat)


@dataclass
class PairOutput:
    r: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    branch_p: BranchCache = field(repr=False)
    branch_q: BranchCache = field(repr=False)


def mvgcn_forward(flat_p, flat_q, params):
    """Full pipeline for one acquisition pair.

    ``flat_p`` and ``flat_q`` are the cached Chebyshev bases of the two
    acquisitions (see :func:`acquisition_basis`).
    """
    if np.shape(flat_p) != np.shape(flat_q):
        raise InvalidInputError(
            f"acquisitions disagree on views or size: {np.shape(flat_p)} vs {np.shape(flat_q)}"
        )
    bp = encode(flat_p, params)
    bq = encode(flat_q, params)
    r = np.sum(bp.zhat * bq.zhat, axis=1)
    logits = params.softmax_w @ r
    return PairOutput(r, logits, softmax(logits), bp, bq)


# ---------------------------------------------------------------------------
# vector-feature baselines


@dataclass
class PcaTransform:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def out_dim(self):
        return self.components.shape[0]

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components.T

    def inverse_transform(self, y):
        return np.asarray(y) @ self.components + self.mean


def pca_fit(train_vectors, out_dim):
    """Principal components of the training vectors.

    Decomposes whichever of the covariance (d x d) or Gram (N x N) matrix is
    smaller. Component signs are fixed so the largest-magnitude entry is
    positive.
    """
    x = np.asarray(train_vectors, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidInputError("train_vectors must be a list of equal-length vectors")
    count, d = x.shape
    if not 1 <= out_dim <= min(d, count):
        raise InvalidInputError(
            f"out_dim={out_dim} must be between 1 and min(d={d}, samples={count})"
        )
    mean = x.mean(axis=0)
    xc = x - mean
    denom = max(count - 1, 1)
    if d <= count:
        values, vectors = sym_eig(xc.T @ xc / denom)
        values = values[::-1][:out_dim]
        components = vectors[:, ::-1][:, :out_dim].T
    else:
        values, vectors = sym_eig(xc @ xc.T / denom)
        values = values[::-1][:out_dim]
        u = vectors[:, ::-1][:, :out_dim]
        scale = np.sqrt(np.maximum(values, 0.0) * denom)
        components = np.zeros((out_dim, d))
        ok = scale > 1e-12 * max(1.0, scale[0])
        components[ok] = (xc.T @ u[:, ok] / scale[ok]).T
    values = np.maximum(values, 0.0)
    pivots = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(out_dim), pivots])
    components *= np.where(signs == 0, 1.0, signs)[:, None]
    return PcaTransform(mean, components, values)


def fcn_forward(x, layers):
    """Dense affine map followed by ReLU, once per ``(weights, bias)`` layer."""
    h = np.asarray(x, dtype=np.float64)
    for w, b in layers:
        if w.shape[1] != h.shape[-1] or b.shape != (w.shape[0],):
            raise InvalidInputError(
                f"layer of shape {w.shape} cannot take input of length {h.shape[-1]}"
            )
        h = np.maximum(h @ w.T + b, 0.0)
    return h


def upper_triangle(view):
    view = np.asarray(view)
    return view[np.triu_indices(view.shape[0], 1)]


def match_vectors(fp, fq):
    """Element-wise product of the two L2-normalized feature vectors."""
    fp = np.asarray(fp, dtype=np.float64)
    fq = np.asarray(fq, dtype=np.float64)
    if fp.shape != fq.shape:
        raise InvalidInputError(f"feature length mismatch {fp.shape} vs {fq.shape}")
    return row_l2_normalize(fp) * row_l2_normalize(fq)


BASELINE_KINDS = ("raw", "pca", "fcn", "fcn2")


@dataclass
class BaselineParams:
    """A vector-feature siamese baseline on one view's raw edge weights.

    ``encoder`` layers run on each acquisition before matching, ``head``
    layers run on the matched vector before the softmax.
    """

    kind: str
    view: int
    encoder: list
    head: list
    softmax_w: np.ndarray
    pca: PcaTransform = None

    def arrays(self):
        out = {}
        for prefix, layers in (("enc", self.encoder), ("head", self.head)):
            for i, (w, b) in enumerate(layers):
                out[f"{prefix}{i}_w"] = w
                out[f"{prefix}{i}_b"] = b
        out["softmax_w"] = self.softmax_w
        return out

    def features(self, raw):
        """Pre-matching features for raw upper-triangle vectors (one per row)."""
        x = np.asarray(raw, dtype=np.float64)
        if self.pca is not None:
            x = self.pca.transform(x)
        return fcn_forward(x, self.encoder)


def _dense(rng, n_in, n_out):
    return (glorot_uniform(rng, (n_out, n_in), n_in, n_out), np.zeros(n_out))


def init_baseline(kind, view, input_dim, rng, pca=None, fcn_dims=(1024, 64)):
    _check_choice(kind, BASELINE_KINDS, "baseline")
    encoder, head = [], []
    d = input_dim
    if kind == "pca":
        if pca is None:
            raise InvalidInputError("the pca baseline needs a fitted PcaTransform")
        d = pca.out_dim
    if kind in ("fcn", "fcn2"):
        encoder.append(_dense(rng, d, fcn_dims[0]))
        d = fcn_dims[0]
    if kind == "fcn2":
        head.append(_dense(rng, d, fcn_dims[1]))
        d = fcn_dims[1]
    return BaselineParams(kind, view, encoder, head, np.zeros((NUM_CLASSES, d)), pca)


def baseline_forward(fp, fq, params):
    """Match two pre-computed feature vectors, run the head layers, then softmax."""
    r = match_vectors(fp, fq)
    return softmax_head(fcn_forward(r, params.head), params.softmax_w)
