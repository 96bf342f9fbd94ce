"""Pair generation, stratified folds, Adam, and the cross-validated training loop."""

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from mvgcn.autodiff import (
    baseline_batch_forward,
    baseline_batch_loss_and_grad,
    mvgcn_batch_forward,
    mvgcn_batch_loss_and_grad,
)
from mvgcn.dataio import load_model, save_model
from mvgcn.errors import DataFormatError, InvalidInputError
from mvgcn.evaluation import ScoredPair, auc, cluster_acquisitions, similarity_matrix
from mvgcn.graph import MEAN_DISTANCE, build_bgg, build_spectral_operator
from mvgcn.model import (
    ACTIVATIONS,
    BASELINE_KINDS,
    POOL_MODES,
    BaselineParams,
    ModelParams,
    PcaTransform,
    acquisition_basis,
    init_baseline,
    init_params,
    pca_fit,
    upper_triangle,
)
from mvgcn.numerics import make_rng

MODEL_KINDS = ("mvgcn", "gcn") + BASELINE_KINDS
EPS_FLOOR = 1e-16


@dataclass(frozen=True)
class PairSample:
    idx_p: int
    idx_q: int
    label: int


def pair_arrays(labels):
    """Index arrays (p, q, match) for every unordered pair, p < q, in row-major order."""
    labels = np.asarray(labels)
    p, q = np.triu_indices(len(labels), 1)
    return p, q, (labels[p] == labels[q]).astype(int)


def generate_pairs(labels):
    p, q, y = pair_arrays(labels)
    return [PairSample(int(a), int(b), int(c)) for a, b, c in zip(p, q, y)]


def stratified_kfold(labels, k, seed):
    """Split indices into ``k`` folds with per-class counts differing by at most one.

    Each class is shuffled, then dealt round-robin; the dealing position carries
    over from one class to the next so fold sizes stay balanced too.
    """
    labels = np.asarray(labels)
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    rng = make_rng(seed)
    folds = [[] for _ in range(k)]
    offset = 0
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if len(members) < k:
            raise InvalidInputError(f"class {cls} has {len(members)} members, fewer than k={k}")
        members = rng.permutation(members)
        for j, idx in enumerate(members):
            folds[(offset + j) % k].append(int(idx))
        offset = (offset + len(members)) % k
    return [np.sort(np.array(f, dtype=int)) for f in folds]


@dataclass
class AdamState:
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """Bias-corrected Adam update, in place on the ``params`` dict of arrays."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    eps = max(state.epsilon, EPS_FLOOR)
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise InvalidInputError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


@dataclass(frozen=True)
class TrainConfig:
    model: str = "mvgcn"
    s: int = 30
    f_out: int = 128
    knn_k: int = 10
    sigma: object = MEAN_DISTANCE
    lr: float = 0.005
    epochs: int = 20
    batch_size: int = 256
    pool_mode: str = "max"
    activation: str = "identity"
    folds: int = 5
    seed: int = 0
    view: int = 0
    pca_dim: int = 100
    fcn_dims: tuple = (1024, 64)
    pairs_per_epoch: int = 0
    workers: int = 1
    kmeans_restarts: int = 10

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise InvalidInputError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.pool_mode not in POOL_MODES:
            raise InvalidInputError(f"pool_mode must be one of {POOL_MODES}")
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"activation must be one of {ACTIVATIONS}")
        for name in ("s", "f_out", "knn_k", "epochs", "batch_size", "folds", "pca_dim", "workers", "kmeans_restarts"):
            if int(getattr(self, name)) < 1:
                raise InvalidInputError(f"{name} must be a positive count")
        if self.lr < 0:
            raise InvalidInputError("lr must be nonnegative")
        if self.view < 0 or self.pairs_per_epoch < 0 or self.seed < 0:
            raise InvalidInputError("view, pairs_per_epoch and seed must be nonnegative")
        if len(self.fcn_dims) != 2 or min(self.fcn_dims) < 1:
            raise InvalidInputError("fcn_dims needs two positive layer widths")
        if not isinstance(self.sigma, str) and not float(self.sigma) > 0:
            raise InvalidInputError("sigma must be 'mean_distance' or a positive number")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# networks: trainable params bound to per-acquisition inputs


class GraphNetwork:
    """MVGCN (all views) or single-view GCN over cached Chebyshev bases."""

    def __init__(self, params, flats, workers=1):
        self.params = params
        self.flats = flats
        self.workers = workers

    def arrays(self):
        return self.params.arrays()

    def loss_and_grad(self, p, q, y):
        return mvgcn_batch_loss_and_grad(self.flats, p, q, y, self.params, self.workers)

    def predict(self, p, q):
        return mvgcn_batch_forward(self.flats, p, q, self.params, self.workers)[1][:, 1]

    def matching_features(self, p, q):
        return mvgcn_batch_forward(self.flats, p, q, self.params, self.workers)[0]


class VectorNetwork:
    """Raw-edge, PCA and FCN baselines on one view's upper-triangle edge weights."""

    def __init__(self, params, inputs):
        self.params = params
        self.inputs = inputs

    def arrays(self):
        return self.params.arrays()

    def loss_and_grad(self, p, q, y):
        return baseline_batch_loss_and_grad(self.inputs, p, q, y, self.params)

    def predict(self, p, q):
        return baseline_batch_forward(self.inputs, p, q, self.params)[1][:, 1]

    def matching_features(self, p, q):
        return baseline_batch_forward(self.inputs, p, q, self.params)[0]


def _check_view(dataset, config):
    if config.model != "mvgcn" and not config.view < len(dataset.view_names):
        raise InvalidInputError(
            f"view {config.view} out of range for {len(dataset.view_names)} views"
        )


def spectral_operator_for(dataset, config):
    return build_spectral_operator(build_bgg(dataset.atlas, config.knn_k, config.sigma))


def prepare_inputs(dataset, config, op=None):
    """Per-acquisition network inputs: cached Chebyshev bases or raw edge vectors."""
    _check_view(dataset, config)
    if config.model in ("mvgcn", "gcn"):
        op = op or spectral_operator_for(dataset, config)
        views = slice(None) if config.model == "mvgcn" else slice(config.view, config.view + 1)
        return [acquisition_basis(op, acq.views[views], config.s) for acq in dataset.acquisitions]
    return np.stack([upper_triangle(acq.views[config.view]) for acq in dataset.acquisitions])


def build_network(dataset, config, inputs, train_idx, rng):
    n = dataset.atlas.n
    if config.model in ("mvgcn", "gcn"):
        params = init_params(n, config.f_out, config.s, rng, config.activation, config.pool_mode)
        return GraphNetwork(params, inputs, config.workers)
    pca = pca_fit(inputs[train_idx], config.pca_dim) if config.model == "pca" else None
    params = init_baseline(config.model, config.view, inputs.shape[1], rng, pca, config.fcn_dims)
    return VectorNetwork(params, inputs)


def bind_network(params, dataset, config, inputs=None):
    """Wrap already-trained params (e.g. loaded from disk) for prediction."""
    inputs = prepare_inputs(dataset, config) if inputs is None else inputs
    if isinstance(params, ModelParams):
        return GraphNetwork(params, inputs, config.workers)
    return VectorNetwork(params, inputs)


# ---------------------------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    network: object
    epoch_losses: list
    test_p: np.ndarray
    test_q: np.ndarray
    test_labels: np.ndarray
    test_scores: np.ndarray
    auc: float

    @property
    def params(self):
        return self.network.params

    def scored_pairs(self):
        return [
            ScoredPair(int(a), int(b), int(y), float(s))
            for a, b, y, s in zip(self.test_p, self.test_q, self.test_labels, self.test_scores)
        ]


def _pairs_within(idx, labels):
    p, q = np.triu_indices(len(idx), 1)
    p, q = idx[p], idx[q]
    return p, q, (labels[p] == labels[q]).astype(int)


def fit(net, tp, tq, ty, config, fold=0):
    """Mini-batch Adam over the given pairs; returns the mean training loss of each epoch.

    Epoch ``e`` shuffles with seed ``(seed XOR e, fold)``.
    """
    state = AdamState(lr=config.lr)
    params = net.arrays()
    losses = []
    for epoch in range(config.epochs):
        order = make_rng((config.seed ^ epoch) * 1000 + fold).permutation(len(tp))
        if config.pairs_per_epoch:
            order = order[: config.pairs_per_epoch]
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            loss, grads = net.loss_and_grad(tp[batch], tq[batch], ty[batch])
            adam_step(params, grads.values, state)
            total += loss * len(batch)
        losses.append(total / len(order))
    return losses


def train_fold(dataset, train_idx, test_idx, config, inputs=None, fold=0):
    """Train on pairs inside ``train_idx`` and score every pair inside ``test_idx``.

    Pairs with one end in each set are never used.
    """
    labels = dataset.labels
    train_idx = np.sort(np.asarray(train_idx, dtype=int))
    test_idx = np.sort(np.asarray(test_idx, dtype=int))
    if np.intersect1d(train_idx, test_idx).size:
        raise InvalidInputError("train and test acquisitions overlap")
    for name, idx in (("training", train_idx), ("held-out", test_idx)):
        if len(np.unique(labels[idx])) < 2:
            raise InvalidInputError(f"{name} fold {fold} contains a single class")
    inputs = prepare_inputs(dataset, config) if inputs is None else inputs
    net = build_network(dataset, config, inputs, train_idx, make_rng(config.seed * 1000 + fold))
    losses = fit(net, *_pairs_within(train_idx, labels), config, fold)
    sp, sq, sy = _pairs_within(test_idx, labels)
    scores = net.predict(sp, sq)
    return FoldResult(fold, net, losses, sp, sq, sy, scores, auc(scores, sy))


@dataclass
class CVResult:
    config: TrainConfig
    folds: list
    fold_results: list
    similarity: np.ndarray
    assignments: np.ndarray
    nmi: float
    fold_nmis: list

    @property
    def fold_aucs(self):
        return [r.auc for r in self.fold_results]

    @property
    def auc_mean(self):
        return float(np.mean(self.fold_aucs))

    @property
    def auc_std(self):
        return float(np.std(self.fold_aucs, ddof=1)) if len(self.fold_aucs) > 1 else 0.0


def run_cross_validation(dataset, config):
    """Stratified k-fold CV: one model per fold, AUC per fold, assembled similarity matrix."""
    if config.folds < 2:
        raise InvalidInputError("cross-validation needs at least 2 folds")
    labels = dataset.labels
    inputs = prepare_inputs(dataset, config)
    folds = stratified_kfold(labels, config.folds, config.seed)
    everyone = np.arange(len(dataset))
    results = [
        train_fold(dataset, np.setdiff1d(everyone, test_idx), test_idx, config, inputs, fold=f)
        for f, test_idx in enumerate(folds)
    ]
    scored = [s for r in results for s in r.scored_pairs()]
    sim = similarity_matrix(scored, len(dataset))
    assignments, score = cluster_acquisitions(
        sim, labels, k=2, seed=config.seed, restarts=config.kmeans_restarts
    )
    # diagnostic: clustering inside each held-out block, where every pair is scored
    fold_nmis = [
        cluster_acquisitions(
            sim[np.ix_(idx, idx)], labels[idx], k=2, seed=config.seed, restarts=config.kmeans_restarts
        )[1]
        for idx in folds
    ]
    return CVResult(config, folds, results, sim, assignments, score, fold_nmis)


# ---------------------------------------------------------------------------
# config text form and model files

# workers changes wall time only, so it stays out of echoes and model files
_UNRECORDED = ("workers",)


def config_items(config):
    """``(key, text)`` for every result-affecting TrainConfig field, in declaration order."""
    items = []
    for f in dataclasses.fields(config):
        if f.name in _UNRECORDED:
            continue
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        items.append((f.name, str(value)))
    return items


def parse_config_value(key, text):
    """Convert the text form of one TrainConfig field to its Python value."""
    defaults = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
    if key not in defaults:
        raise InvalidInputError(f"unknown training setting {key!r}")
    text = str(text).strip()
    default = defaults[key]
    try:
        if key == "sigma":
            return text if text == MEAN_DISTANCE else float(text)
        if key == "fcn_dims":
            return tuple(int(v) for v in text.split(","))
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise InvalidInputError(f"bad value {text!r} for {key}") from None
    return text


def config_from_items(items, base=None):
    base = base or TrainConfig()
    return base.replace(**{k: parse_config_value(k, v) for k, v in dict(items).items()})


def save_network(path, net, config, fold, test_idx):
    """Write a fold's trained parameters with everything needed to rebuild the network."""
    meta = dict(config_items(config))
    meta["fold"] = str(fold)
    meta["test_indices"] = ",".join(str(int(i)) for i in test_idx)
    arrays = dict(net.arrays())
    pca = getattr(net.params, "pca", None)
    if pca is not None:
        arrays.update(pca_mean=pca.mean, pca_components=pca.components,
                      pca_explained_variance=pca.explained_variance)
    save_model(path, meta, arrays)


@dataclass
class SavedModel:
    config: TrainConfig
    params: object
    fold: int
    test_indices: np.ndarray


def load_network(path):
    """Inverse of :func:`save_network`."""
    meta, arrays = load_model(path)
    try:
        fold = int(meta.pop("fold"))
        raw = meta.pop("test_indices")
    except KeyError as exc:
        raise DataFormatError(f"{path}: model metadata lacks {exc.args[0]!r}") from None
    test_idx = np.array([int(v) for v in raw.split(",") if v], dtype=int)
    try:
        config = config_from_items(meta)
    except InvalidInputError as exc:
        raise DataFormatError(f"{path}: {exc}") from None
    try:
        if config.model in ("mvgcn", "gcn"):
            params = ModelParams(arrays["theta"], arrays["softmax_w"], config.activation, config.pool_mode)
        else:
            params = _baseline_from_arrays(config, arrays)
    except KeyError as exc:
        raise DataFormatError(f"{path}: missing array {exc.args[0]!r}") from None
    return SavedModel(config, params, fold, test_idx)


def _baseline_from_arrays(config, arrays):
    layers = {"enc": [], "head": []}
    for prefix, out in layers.items():
        i = 0
        while f"{prefix}{i}_w" in arrays:
            out.append((arrays[f"{prefix}{i}_w"], arrays[f"{prefix}{i}_b"]))
            i += 1
    pca = None
    if config.model == "pca":
        pca = PcaTransform(arrays["pca_mean"], arrays["pca_components"], arrays["pca_explained_variance"])
    return BaselineParams(config.model, config.view, layers["enc"], layers["head"], arrays["softmax_w"], pca)
