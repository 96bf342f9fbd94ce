"""Datasets on disk, max-value normalization, and the synthetic generator.

File formats
------------
atlas
    one ROI per line, ``name<TAB>x<TAB>y<TAB>z``; ``#`` lines are comments.
manifest
    first line ``# mvgcn-manifest v1``, then ``subject_id<TAB>label<TAB>view1<TAB>...``
    with view paths relative to the manifest. An optional ``# views:`` comment
    names the views.
matrix
    ``n`` lines of ``n`` whitespace-separated decimals; ``#`` lines are comments.
model
    ``# mvgcn-model v1`` followed by ``key=value`` metadata, then one
    ``# array <name> <shape>`` block per parameter array (theta first, then
    the softmax weights), each written as a matrix.
"""

import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mvgcn.errors import DataFormatError, DataWarning, InvalidInputError
from mvgcn.graph import RoiAtlas
from mvgcn.numerics import make_rng

MANIFEST_HEADER = "# mvgcn-manifest v1"
MODEL_HEADER = "# mvgcn-model v1"
CLASS_NAMES = ("PD", "HC")
SYMMETRY_TOL = 1e-9


@dataclass(frozen=True)
class Acquisition:
    subject_id: str
    label: int
    views: np.ndarray = field(repr=False)

    @property
    def n(self):
        return self.views.shape[1]


@dataclass(frozen=True)
class Dataset:
    atlas: RoiAtlas
    acquisitions: tuple
    view_names: tuple
    class_names: tuple = CLASS_NAMES

    def __post_init__(self):
        object.__setattr__(self, "acquisitions", tuple(self.acquisitions))
        object.__setattr__(self, "view_names", tuple(self.view_names))
        m = len(self.view_names)
        for acq in self.acquisitions:
            if acq.views.shape != (m, self.atlas.n, self.atlas.n):
                raise InvalidInputError(
                    f"acquisition {acq.subject_id} has views of shape {acq.views.shape}, "
                    f"expected {(m, self.atlas.n, self.atlas.n)}"
                )
            if not 0 <= acq.label < len(self.class_names):
                raise InvalidInputError(f"acquisition {acq.subject_id} has label {acq.label}")

    @property
    def labels(self):
        return np.array([a.label for a in self.acquisitions], dtype=int)

    @property
    def views(self):
        """All view matrices as an (N, M, n, n) array."""
        return np.stack([a.views for a in self.acquisitions])

    def __len__(self):
        return len(self.acquisitions)


@dataclass(frozen=True)
class SynthConfig:
    n: int = 20
    m: int = 3
    n_per_class: tuple = (30, 30)
    class_separation: float = 0.8
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n < 4:
            raise InvalidInputError("synthetic n must be >= 4")
        if self.m < 1:
            raise InvalidInputError("synthetic view count must be >= 1")
        if len(self.n_per_class) != 2 or min(self.n_per_class) < 2:
            raise InvalidInputError("n_per_class needs two counts, each >= 2")
        if not 0.0 <= self.class_separation <= 1.0:
            raise InvalidInputError("class_separation must lie in [0, 1]")
        if self.noise < 0:
            raise InvalidInputError("noise must be nonnegative")


def max_normalize(view):
    """Divide by the largest entry. An all-zero matrix comes back unchanged with a warning."""
    view = np.asarray(view, dtype=np.float64)
    if np.any(view < 0):
        raise InvalidInputError("connectivity matrix has negative entries")
    top = view.max() if view.size else 0.0
    if top == 0.0:
        warnings.warn("all-zero connectivity matrix left unnormalized", DataWarning, stacklevel=2)
        return view.copy()
    return view / top


# ---------------------------------------------------------------------------
# text formats


def _data_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if stripped and not stripped.startswith("#"):
                yield lineno, line.rstrip("\n")


def read_matrix(path, n=None):
    rows = []
    for lineno, line in _data_lines(path):
        try:
            rows.append([float(tok) for tok in line.split()])
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: not a number ({exc})") from None
        if rows[0] and len(rows[-1]) != len(rows[0]):
            raise DataFormatError(
                f"{path}:{lineno}: ragged row with {len(rows[-1])} values, expected {len(rows[0])}"
            )
    expected = n if n is not None else (len(rows[0]) if rows else 0)
    if len(rows) != expected:
        raise DataFormatError(f"{path}: has {len(rows)} rows, expected n={expected}")
    if rows and len(rows[0]) != expected:
        raise DataFormatError(f"{path}: has {len(rows[0])} columns, expected n={expected}")
    a = np.array(rows, dtype=np.float64).reshape(expected, expected)
    if not np.all(np.isfinite(a)):
        raise DataFormatError(f"{path}: contains non-finite values")
    return a


def format_matrix(a, header=()):
    lines = [f"# {h}" for h in header]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in np.atleast_2d(a)]
    return "\n".join(lines) + "\n"


def write_matrix(path, a, header=()):
    Path(path).write_text(format_matrix(a, header), encoding="utf-8")


def read_atlas(path):
    names, coords = [], []
    for lineno, line in _data_lines(path):
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataFormatError(f"{path}:{lineno}: expected name<TAB>x<TAB>y<TAB>z")
        try:
            coords.append([float(v) for v in parts[1:]])
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: coordinates must be decimals") from None
        names.append(parts[0])
    try:
        return RoiAtlas(tuple(names), np.array(coords).reshape(-1, 3))
    except InvalidInputError as exc:
        raise DataFormatError(f"{path}: {exc}") from None


def write_atlas(path, atlas):
    lines = [f"{name}\t{x:.17g}\t{y:.17g}\t{z:.17g}" for name, (x, y, z) in zip(atlas.names, atlas.coords)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_label(token, where):
    if token in CLASS_NAMES:
        return CLASS_NAMES.index(token)
    if token in ("0", "1"):
        return int(token)
    raise DataFormatError(f"{where}: unknown label {token!r}; expected one of {CLASS_NAMES}")


def load_view(path, n):
    """Read, validate, symmetrize if needed, and max-normalize one connectivity matrix."""
    a = read_matrix(path, n)
    if np.any(a < 0):
        raise DataFormatError(f"{path}: connectivity matrix has negative entries")
    scale = max(1.0, float(np.abs(a).max()))
    if np.max(np.abs(a - a.T)) > SYMMETRY_TOL * scale:
        warnings.warn(f"{path}: asymmetric matrix symmetrized as (X + X^T)/2", DataWarning, stacklevel=2)
    # also removes sub-tolerance asymmetry so downstream symmetry is exact
    a = 0.5 * (a + a.T)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DataWarning)
        out = max_normalize(a)
    if not out.any():
        warnings.warn(f"{path}: all-zero connectivity matrix", DataWarning, stacklevel=2)
    return out


def load_dataset(manifest_path, atlas_path):
    manifest_path = Path(manifest_path)
    atlas = read_atlas(atlas_path)
    base = manifest_path.parent
    try:
        text = manifest_path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataFormatError(f"{manifest_path}: cannot read manifest ({exc.strerror})") from None
    if not text or text[0].strip() != MANIFEST_HEADER:
        raise DataFormatError(f"{manifest_path}:1: missing header {MANIFEST_HEADER!r}")
    view_names = None
    acquisitions, m = [], None
    for lineno, line in enumerate(text[1:], start=2):
        stripped = line.strip()
        if stripped.startswith("# views:"):
            view_names = tuple(stripped[len("# views:"):].split())
            continue
        if not stripped or stripped.startswith("#"):
            continue
        parts = line.rstrip("\n").split("\t")
        where = f"{manifest_path}:{lineno}"
        if len(parts) < 3:
            raise DataFormatError(f"{where}: expected subject_id<TAB>label<TAB>view paths")
        if m is None:
            m = len(parts) - 2
        elif len(parts) - 2 != m:
            raise DataFormatError(f"{where}: lists {len(parts) - 2} views, expected {m}")
        label = parse_label(parts[1], where)
        views = []
        for rel in parts[2:]:
            path = base / rel
            if not path.is_file():
                raise DataFormatError(f"{where}: matrix file {path} not found")
            views.append(load_view(path, atlas.n))
        acquisitions.append(Acquisition(parts[0], label, np.stack(views)))
    if not acquisitions:
        raise DataFormatError(f"{manifest_path}: no acquisitions listed")
    if view_names is None or len(view_names) != m:
        view_names = tuple(f"view{k + 1}" for k in range(m))
    return Dataset(atlas, acquisitions, view_names)


def save_dataset(dataset, out_dir):
    """Write atlas.tsv, manifest.tsv, labels.tsv and one matrix file per view."""
    out = Path(out_dir)
    (out / "matrices").mkdir(parents=True, exist_ok=True)
    write_atlas(out / "atlas.tsv", dataset.atlas)
    manifest = [MANIFEST_HEADER, "# views: " + " ".join(dataset.view_names)]
    labels = ["# subject_id\tlabel"]
    for acq in dataset.acquisitions:
        paths = []
        for name, view in zip(dataset.view_names, acq.views):
            rel = f"matrices/{acq.subject_id}_{name}.txt"
            write_matrix(out / rel, view)
            paths.append(rel)
        label = dataset.class_names[acq.label]
        manifest.append("\t".join([acq.subject_id, label] + paths))
        labels.append(f"{acq.subject_id}\t{label}")
    (out / "manifest.tsv").write_text("\n".join(manifest) + "\n", encoding="utf-8")
    (out / "labels.tsv").write_text("\n".join(labels) + "\n", encoding="utf-8")
    return out / "manifest.tsv", out / "atlas.tsv"


# ---------------------------------------------------------------------------
# synthetic data


def _assign_blocks(coords, n_blocks):
    # contiguous slabs along x, so communities are spatially coherent on the geometry graph
    order = np.argsort(coords[:, 0], kind="stable")
    blocks = np.empty(len(coords), dtype=int)
    for b, members in enumerate(np.array_split(order, n_blocks)):
        blocks[members] = b
    return blocks


def _block_matrix(rng, blocks, n_blocks):
    strength = rng.uniform(0.0, 0.3, size=(n_blocks, n_blocks))
    strength = np.triu(strength, 1)
    strength = strength + strength.T
    strength[np.diag_indices(n_blocks)] = rng.uniform(0.5, 0.9, size=n_blocks)
    base = strength[blocks[:, None], blocks[None, :]]
    jitter = rng.uniform(-0.1, 0.1, size=base.shape)
    return base + 0.5 * (jitter + jitter.T)


def generate_synthetic(cfg):
    """Seeded two-class multi-view dataset with planted community structure.

    ROIs fall into ``max(m, 2)`` spatial communities. Each class has its own
    community connectivity profile; ``class_separation`` blends it with a
    profile shared by both classes. View ``k`` applies a fixed view-specific
    gain pattern and then corrupts community ``k`` with heavy subject-level
    noise, so each view is unreliable on a different part of the brain.
    """
    rng = make_rng(cfg.seed)
    n, m = cfg.n, cfg.m
    coords = rng.uniform(0.0, 1.0, size=(n, 3))
    atlas = RoiAtlas(tuple(f"ROI{i:03d}" for i in range(n)), coords)
    n_blocks = max(m, 2)
    blocks = _assign_blocks(coords, n_blocks)
    shared = _block_matrix(rng, blocks, n_blocks)
    prototypes = [
        (1.0 - cfg.class_separation) * shared + cfg.class_separation * _block_matrix(rng, blocks, n_blocks)
        for _ in range(2)
    ]
    gains = []
    for _ in range(m):
        g = rng.uniform(0.8, 1.2, size=(n, n))
        gains.append(0.5 * (g + g.T))
    corrupt = [blocks == (k % n_blocks) for k in range(m)]

    acquisitions = []
    labels = [0] * cfg.n_per_class[0] + [1] * cfg.n_per_class[1]
    for idx, label in enumerate(labels):
        views = np.empty((m, n, n))
        for k in range(m):
            noise = cfg.noise * rng.standard_normal((n, n))
            mask = corrupt[k][:, None] & corrupt[k][None, :]
            noise += np.where(mask, 5.0 * cfg.noise * rng.standard_normal((n, n)), 0.0)
            x = prototypes[label] * gains[k] + noise
            x = np.clip(0.5 * (x + x.T), 0.0, 1.0)
            np.fill_diagonal(x, 0.0)
            views[k] = max_normalize(x)
        subject = f"{CLASS_NAMES[label]}{idx:04d}"
        acquisitions.append(Acquisition(subject, label, views))
    return Dataset(atlas, acquisitions, tuple(f"view{k + 1}" for k in range(m)))


# ---------------------------------------------------------------------------
# model files


def save_model(path, meta, arrays):
    """Write metadata (``key=value``) and named arrays; arrays keep their insertion order."""
    lines = [MODEL_HEADER]
    lines += [f"# {k}={v}" for k, v in meta.items()]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        shape = "x".join(str(d) for d in arr.shape)
        lines.append(f"# array {name} {shape}")
        flat = arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr.reshape(1, -1)
        lines += [" ".join(f"{v:.17g}" for v in row) for row in flat]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_model(path):
    """Inverse of :func:`save_model`; returns ``(meta, arrays)``."""
    try:
        text = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataFormatError(f"{path}: cannot read model file ({exc.strerror})") from None
    if not text or text[0].strip() != MODEL_HEADER:
        raise DataFormatError(f"{path}:1: missing header {MODEL_HEADER!r}")
    meta, arrays = {}, {}
    current, shape, rows = None, None, []

    def finish(lineno):
        if current is None:
            return
        values = np.array(rows, dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise DataFormatError(f"{path}:{lineno}: array {current} has {values.size} values, expected shape {shape}")
        arrays[current] = values.reshape(shape)

    for lineno, line in enumerate(text[1:], start=2):
        stripped = line.strip()
        if stripped.startswith("# array "):
            finish(lineno)
            _, _, name, dims = stripped.split()
            current, rows = name, []
            shape = tuple(int(d) for d in dims.split("x"))
        elif stripped.startswith("#"):
            key, sep, value = stripped[1:].strip().partition("=")
            if sep:
                meta[key.strip()] = value.strip()
        elif stripped:
            if current is None:
                raise DataFormatError(f"{path}:{lineno}: values before any array header")
            try:
                rows.extend(float(tok) for tok in stripped.split())
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: not a number") from None
    finish(len(text))
    return meta, arrays


def ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {path}: {exc.strerror}") from None
    if not os.access(path, os.W_OK):
        raise OSError(f"output directory {path} is not writable")
    return Path(path)
