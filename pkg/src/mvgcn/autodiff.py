"""Hand-derived gradients of the pair cross-entropy loss.

Backward through the pipeline, per branch:

* softmax + cross-entropy: ``d logits = probs - onehot(label)``
* matching: ``d zhat_p = dr[:, None] * zhat_q`` (and symmetrically for q)
* row normalization: ``dz = (I - zhat zhat^T) d zhat / ||z||``, zero through zero rows
* max pooling routes to the winning view, mean pooling splits ``1/M``
* ReLU masks by the sign of the pre-activation
* graph conv: ``d theta_flat = sum_views flat^T dH``; the cached Chebyshev
  basis means no Laplacian products are needed.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from mvgcn.errors import InvalidInputError
from mvgcn.graph import RoiAtlas, build_bgg, build_spectral_operator
from mvgcn.model import (
    ACTIVATIONS,
    NUM_CLASSES,
    POOL_MODES,
    ModelParams,
    acquisition_basis,
    encode,
    mvgcn_forward,
    softmax,
    unflatten_theta,
)
from mvgcn.numerics import make_rng

PROB_FLOOR = 1e-15


@dataclass
class LossValue:
    value: float
    probs: np.ndarray


@dataclass
class Gradients:
    """Gradient arrays keyed like the ``arrays()`` of the matching params."""

    values: dict

    @property
    def d_theta(self):
        return self.values["theta"]

    @property
    def d_softmax_w(self):
        return self.values["softmax_w"]

    def __getitem__(self, key):
        return self.values[key]


def cross_entropy(probs, label):
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[-1]:
        raise InvalidInputError(f"label {label} out of range for {probs.shape[-1]} classes")
    return LossValue(float(-np.log(max(probs[label], PROB_FLOOR))), probs)


def _normalize_backward(norms, zhat, d_zhat):
    dot = np.sum(zhat * d_zhat, axis=-1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)[..., None]
    dz = (d_zhat - zhat * dot) / safe
    dz[norms == 0.0] = 0.0
    return dz


def _branch_backward(branch, d_zhat, params):
    """d theta_flat contributed by one branch, given the gradient at its normalized rows."""
    dz = _normalize_backward(branch.norms, branch.zhat, d_zhat)
    h = branch.pre_activation
    m = h.shape[0]
    if params.pool_mode == "max":
        d_y = np.zeros_like(h)
        np.put_along_axis(d_y, branch.features.argmax_view[None], dz[None], axis=0)
    else:
        d_y = np.broadcast_to(dz / m, h.shape)
    d_h = d_y * (h > 0.0) if params.activation == "relu" else d_y
    grad = branch.flat[0].T @ d_h[0]
    for k in range(1, m):
        grad = grad + branch.flat[k].T @ d_h[k]
    return grad


def mvgcn_backward(out, label, params):
    """Gradient of ``-log p(label)`` for one pair, summed over both siamese branches."""
    if out.branch_p is None or out.branch_q is None:
        raise RuntimeError("forward caches missing; run mvgcn_forward first")
    if not 0 <= label < NUM_CLASSES:
        raise InvalidInputError(f"label {label} out of range")
    d_logits = out.probs.copy()
    d_logits[label] -= 1.0
    d_w = np.outer(d_logits, out.r)
    d_r = params.softmax_w.T @ d_logits
    zp, zq = out.branch_p.zhat, out.branch_q.zhat
    flat = _branch_backward(out.branch_p, d_r[:, None] * zq, params)
    flat = flat + _branch_backward(out.branch_q, d_r[:, None] * zp, params)
    d_theta = unflatten_theta(flat, params.f_in, params.order)
    return Gradients({"theta": d_theta, "softmax_w": d_w})


def _pair_logits(zh, pos_p, pos_q, w):
    r = np.sum(zh[pos_p] * zh[pos_q], axis=-1)
    return r, r @ w.T


def _batch_head(r, logits, labels):
    probs = softmax(logits)
    batch = len(labels)
    rows = np.arange(batch)
    m = np.max(logits, axis=1)
    lse = m + np.log(np.sum(np.exp(logits - m[:, None]), axis=1))
    loss = float(np.mean(lse - logits[rows, labels]))
    d_logits = probs.copy()
    d_logits[rows, labels] -= 1.0
    d_logits /= batch
    return loss, d_logits


def _map(fn, items, workers):
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _positions(p_idx, q_idx):
    acqs, inverse = np.unique(np.concatenate([p_idx, q_idx]), return_inverse=True)
    return acqs, inverse[: len(p_idx)], inverse[len(p_idx):]


def mvgcn_batch_loss_and_grad(flats, p_idx, q_idx, labels, params, workers=1):
    """Mean cross-entropy over a batch of pairs and its gradient.

    Each acquisition in the batch is encoded once. Per-acquisition gradient
    contributions are summed in ascending acquisition index, so the result is
    the same for any ``workers``.
    """
    p_idx = np.asarray(p_idx)
    q_idx = np.asarray(q_idx)
    labels = np.asarray(labels)
    acqs, pos_p, pos_q = _positions(p_idx, q_idx)
    caches = _map(lambda a: encode(flats[a], params), list(acqs), workers)
    zh = np.stack([c.zhat for c in caches])
    r, logits = _pair_logits(zh, pos_p, pos_q, params.softmax_w)
    loss, d_logits = _batch_head(r, logits, labels)
    d_w = d_logits.T @ r
    d_r = d_logits @ params.softmax_w
    d_zh = np.zeros_like(zh)
    np.add.at(d_zh, pos_p, d_r[:, :, None] * zh[pos_q])
    np.add.at(d_zh, pos_q, d_r[:, :, None] * zh[pos_p])
    parts = _map(
        lambda i: _branch_backward(caches[i], d_zh[i], params), list(range(len(acqs))), workers
    )
    flat = parts[0]
    for part in parts[1:]:
        flat = flat + part
    d_theta = unflatten_theta(flat, params.f_in, params.order)
    return loss, Gradients({"theta": d_theta, "softmax_w": d_w})


def mvgcn_batch_forward(flats, p_idx, q_idx, params, workers=1):
    """Matching vectors ``r`` and class probabilities for a batch of pairs."""
    acqs, pos_p, pos_q = _positions(np.asarray(p_idx), np.asarray(q_idx))
    caches = _map(lambda a: encode(flats[a], params), list(acqs), workers)
    zh = np.stack([c.zhat for c in caches])
    r, logits = _pair_logits(zh, pos_p, pos_q, params.softmax_w)
    return r, softmax(logits)


# ---------------------------------------------------------------------------
# baselines


def _dense_forward(h, layers):
    inputs, pres = [], []
    for w, b in layers:
        inputs.append(h)
        pre = h @ w.T + b
        pres.append(pre)
        h = np.maximum(pre, 0.0)
    return h, inputs, pres


def _dense_backward(d_h, layers, inputs, pres, prefix, grads):
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        d_pre = d_h * (pres[i] > 0.0)
        grads[f"{prefix}{i}_w"] = d_pre.T @ inputs[i]
        grads[f"{prefix}{i}_b"] = d_pre.sum(axis=0)
        d_h = d_pre @ w
    return d_h


@dataclass
class _BaselinePass:
    pos_p: np.ndarray
    pos_q: np.ndarray
    enc_in: list
    enc_pre: list
    norms: np.ndarray
    fh: np.ndarray
    r: np.ndarray
    head_in: list
    head_pre: list
    h: np.ndarray
    logits: np.ndarray


def _baseline_pass(params, inputs, p_idx, q_idx):
    acqs, pos_p, pos_q = _positions(np.asarray(p_idx), np.asarray(q_idx))
    x = np.asarray(inputs[acqs], dtype=np.float64)
    if params.pca is not None:
        x = params.pca.transform(x)
    feats, enc_in, enc_pre = _dense_forward(x, params.encoder)
    norms = np.sqrt(np.sum(feats * feats, axis=1))
    fh = feats / np.where(norms > 0.0, norms, 1.0)[:, None]
    r = fh[pos_p] * fh[pos_q]
    h, head_in, head_pre = _dense_forward(r, params.head)
    logits = h @ params.softmax_w.T
    return _BaselinePass(
        pos_p, pos_q, enc_in, enc_pre, norms, fh, r, head_in, head_pre, h, logits
    )


def baseline_batch_loss_and_grad(inputs, p_idx, q_idx, labels, params):
    """Mean cross-entropy and gradient for a vector-feature baseline.

    ``inputs`` holds one raw feature vector per acquisition (rows).
    """
    labels = np.asarray(labels)
    st = _baseline_pass(params, inputs, p_idx, q_idx)
    loss, d_logits = _batch_head(st.r, st.logits, labels)
    grads = {"softmax_w": d_logits.T @ st.h}
    d_h = d_logits @ params.softmax_w
    d_r = _dense_backward(d_h, params.head, st.head_in, st.head_pre, "head", grads)
    d_fh = np.zeros_like(st.fh)
    np.add.at(d_fh, st.pos_p, d_r * st.fh[st.pos_q])
    np.add.at(d_fh, st.pos_q, d_r * st.fh[st.pos_p])
    d_feats = _normalize_backward(st.norms, st.fh, d_fh)
    _dense_backward(d_feats, params.encoder, st.enc_in, st.enc_pre, "enc", grads)
    return loss, Gradients(grads)


def baseline_batch_forward(inputs, p_idx, q_idx, params):
    st = _baseline_pass(params, inputs, p_idx, q_idx)
    return st.r, softmax(st.logits)


# ---------------------------------------------------------------------------
# finite differences

_XP = np.longdouble


def _reference_loss(theta, softmax_w, flat_p, flat_q, label, activation, pool_mode):
    """Pair loss evaluated in extended precision, written independently of :func:`encode`.

    Keeps the rounding noise of central differences far below the gradients
    being checked.
    """
    f_in, f_out, s = theta.shape
    zs = []
    for flat in (flat_p, flat_q):
        m, n, _ = flat.shape
        basis = flat.astype(_XP).reshape(m, n, s, f_in)
        h = np.zeros((m, n, f_out), dtype=_XP)
        for p in range(s):
            h += basis[:, :, p, :] @ theta[:, :, p]
        y = np.maximum(h, 0) if activation == "relu" else h
        z = y.max(axis=0) if pool_mode == "max" else y.sum(axis=0) / m
        norm = np.sqrt((z * z).sum(axis=1))
        norm[norm == 0] = 1
        zs.append(z / norm[:, None])
    r = (zs[0] * zs[1]).sum(axis=1)
    logits = softmax_w @ r
    top = logits.max()
    return top + np.log(np.exp(logits - top).sum()) - logits[label]


def _kink_signature(flat_p, flat_q, params):
    sig = []
    for flat in (flat_p, flat_q):
        c = encode(flat, params)
        sig.append(c.norms > 0.0)
        if params.activation == "relu":
            sig.append(c.pre_activation > 0.0)
        if params.pool_mode == "max":
            sig.append(c.features.argmax_view)
    return sig


def _same_signature(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_difference_check(
    params, flat_p, flat_q, label, epsilon=1e-5, n_coords=200, seed=0, analytic=None
):
    """Largest relative error between analytic and central-difference gradients.

    Checks every softmax weight plus ``n_coords`` randomly chosen theta entries
    (all of them if theta is smaller). A coordinate whose perturbation flips a
    ReLU sign, a max-pool winner or a zero row is a kink crossing and is skipped.

    Parameters
    ----------
    analytic : Gradients, optional
        Gradient to verify; defaults to :func:`mvgcn_backward` at ``params``.

    Returns
    -------
    float
        ``max |a - f| / max(|a|, |f|, 1e-8)`` over the checked coordinates.
    """
    if not 1e-7 <= epsilon <= 1e-4:
        raise InvalidInputError(f"epsilon must be in [1e-7, 1e-4], got {epsilon}")
    if analytic is None:
        analytic = mvgcn_backward(mvgcn_forward(flat_p, flat_q, params), label, params)
    base_sig = _kink_signature(flat_p, flat_q, params)
    theta_x = params.theta.astype(_XP)
    w_x = params.softmax_w.astype(_XP)

    def loss_at(name, idx, step):
        theta, w = theta_x.copy(), w_x.copy()
        target = theta if name == "theta" else w
        target[idx] += step
        return _reference_loss(
            theta, w, flat_p, flat_q, label, params.activation, params.pool_mode
        )

    coords = [("softmax_w", idx) for idx in np.ndindex(params.softmax_w.shape)]
    size = params.theta.size
    picked = np.arange(size) if size <= n_coords else make_rng(seed).choice(
        size, n_coords, replace=False
    )
    coords += [("theta", np.unravel_index(int(i), params.theta.shape)) for i in np.sort(picked)]

    worst = 0.0
    for name, idx in coords:
        if name == "theta":
            plus, minus = params.copy(), params.copy()
            plus.theta[idx] += epsilon
            minus.theta[idx] -= epsilon
            if not (
                _same_signature(base_sig, _kink_signature(flat_p, flat_q, plus))
                and _same_signature(base_sig, _kink_signature(flat_p, flat_q, minus))
            ):
                continue
        eps = _XP(epsilon)
        numeric = float((loss_at(name, idx, eps) - loss_at(name, idx, -eps)) / (2 * eps))
        a = float(analytic[name][idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# seeded gradient-check suite

GRADCHECK_SHAPES = ((4, 1, 2, 2), (6, 2, 3, 4), (8, 3, 5, 8))


@dataclass
class GradcheckInstance:
    params: ModelParams
    flat_p: np.ndarray
    flat_q: np.ndarray
    label: int


def random_instance(n, m, s, f_out, seed, activation="relu", pool_mode="max"):
    """A random pair on a random K-NN graph with random, nonzero parameters."""
    rng = make_rng(seed)
    atlas = RoiAtlas(tuple(f"roi{i}" for i in range(n)), rng.uniform(0.0, 1.0, (n, 3)))
    op = build_spectral_operator(build_bgg(atlas, min(2, n - 1)))
    flats = []
    for _ in range(2):
        x = rng.uniform(0.0, 1.0, (m, n, n))
        x = 0.5 * (x + x.transpose(0, 2, 1))
        flats.append(acquisition_basis(op, x, s))
    params = ModelParams(
        rng.normal(0.0, 0.5, (n, f_out, s)),
        rng.normal(0.0, 1.0, (NUM_CLASSES, n)),
        activation,
        pool_mode,
    )
    return GradcheckInstance(params, flats[0], flats[1], int(rng.integers(NUM_CLASSES)))


def gradcheck_suite(seeds=20, shapes=GRADCHECK_SHAPES, epsilon=1e-5):
    """Run :func:`finite_difference_check` over shapes x activations x pools x seeds.

    Returns
    -------
    list of (shape, activation, pool_mode, seed, max relative error)
    """
    rows = []
    for shape in shapes:
        for activation in ACTIVATIONS:
            for pool_mode in POOL_MODES:
                for seed in range(seeds):
                    inst = random_instance(*shape, seed, activation, pool_mode)
                    err = finite_difference_check(
                        inst.params, inst.flat_p, inst.flat_q, inst.label, epsilon, seed=seed
                    )
                    rows.append((shape, activation, pool_mode, seed, err))
    return rows
