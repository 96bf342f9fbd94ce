"""Command-line entry point: ``mvgcn generate | train | evaluate | analyze | gradcheck``.

Settings come from an optional ``--config`` file of ``key = value`` lines
(``#`` starts a comment) whose keys are the TrainConfig / SynthConfig field
names; command-line flags override the file, which overrides the defaults.

Exit codes: 0 success, 1 data or runtime failure, 2 usage or configuration error.
"""

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from mvgcn.autodiff import GRADCHECK_SHAPES, gradcheck_suite
from mvgcn.dataio import SynthConfig, ensure_dir, format_matrix, generate_synthetic, load_dataset, save_dataset
from mvgcn.errors import InvalidInputError
from mvgcn.evaluation import auc, cluster_acquisitions, roi_group_report
from mvgcn.model import ACTIVATIONS, BASELINE_KINDS, POOL_MODES
from mvgcn.training import (
    MODEL_KINDS,
    TrainConfig,
    bind_network,
    config_items,
    load_network,
    pair_arrays,
    parse_config_value,
    run_cross_validation,
    save_network,
)

log = logging.getLogger("mvgcn")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
PRECEDENCE = "# precedence: command-line flags > config file > defaults"
DATA_KEYS = ("manifest", "atlas")
SYNTH_KEYS = tuple(f.name for f in dataclasses.fields(SynthConfig))
TRAIN_KEYS = tuple(name for name, _ in config_items(TrainConfig())) + ("workers",)


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 2."""


def read_config_file(path, allowed):
    """Parse ``key = value`` lines; dashes in keys read as underscores."""
    if path is None:
        return {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    out = {}
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        key, sep, value = text.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        if key not in allowed:
            raise UsageError(f"{path}:{lineno}: unknown setting {key!r}")
        out[key] = value.strip()
    return out


def merged_settings(args, allowed):
    """Config-file values overlaid by every flag the user actually gave."""
    settings = read_config_file(args.config, allowed)
    for key in allowed:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return settings


def echo_block(command, items):
    lines = [f"# mvgcn {command}", PRECEDENCE]
    lines += [f"# {k} = {v}" for k, v in items]
    return lines


def _text(value):
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


# ---------------------------------------------------------------------------
# generate


def synth_config(settings):
    kw = {}
    for key, value in settings.items():
        if key == "n_per_class":
            parts = value if isinstance(value, (list, tuple)) else str(value).replace(",", " ").split()
            kw[key] = tuple(int(v) for v in parts)
        elif key in ("class_separation", "noise"):
            kw[key] = float(value)
        else:
            kw[key] = int(value)
    return SynthConfig(**kw)


def cmd_generate(args):
    try:
        cfg = synth_config(merged_settings(args, SYNTH_KEYS))
    except (ValueError, InvalidInputError) as exc:
        raise UsageError(str(exc)) from None
    try:
        ensure_dir(args.out)
    except OSError as exc:
        raise UsageError(str(exc)) from None
    dataset = generate_synthetic(cfg)
    save_dataset(dataset, args.out)
    items = [(f.name, _text(getattr(cfg, f.name))) for f in dataclasses.fields(cfg)]
    lines = echo_block("generate", items) + [f"{k} = {v}" for k, v in items]
    (Path(args.out) / "synth_config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    log.info("wrote %d acquisitions x %d views to %s", len(dataset), cfg.m, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def train_config(settings):
    kw = {k: parse_config_value(k, _text(v)) for k, v in settings.items() if k not in DATA_KEYS}
    return TrainConfig(**kw)


def _data_paths(settings, args):
    data = getattr(args, "data", None)
    manifest = settings.get("manifest") or (data and str(Path(data) / "manifest.tsv"))
    atlas = settings.get("atlas") or (data and str(Path(data) / "atlas.tsv"))
    if not manifest or not atlas:
        raise UsageError("give --data DIR or both --manifest and --atlas")
    return str(manifest), str(atlas)


def cmd_train(args):
    settings = merged_settings(args, TRAIN_KEYS + DATA_KEYS)
    if args.baseline is not None:
        settings["model"] = args.baseline
    manifest, atlas = _data_paths(settings, args)
    try:
        config = train_config(settings)
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from None
    try:
        ensure_dir(args.out)
    except OSError as exc:
        raise UsageError(str(exc)) from None

    dataset = load_dataset(manifest, atlas)
    log.info("training %s on %d acquisitions, %d folds", config.model, len(dataset), config.folds)
    result = run_cross_validation(dataset, config)

    items = [("manifest", manifest), ("atlas", atlas)] + config_items(config)
    echo = echo_block("train", items)
    out = Path(args.out)
    for fr, test_idx in zip(result.fold_results, result.folds):
        save_network(out / f"fold_{fr.fold}.model", fr.network, config, fr.fold, test_idx)
    sim_header = [line[2:] for line in echo]
    sim_header.append("predicted match probability; diagonal 1, -1 = unscored (pair straddles folds)")
    (out / "similarity.txt").write_text(format_matrix(result.similarity, sim_header), encoding="utf-8")

    metrics = [
        ("auc_mean", repr(result.auc_mean)),
        ("auc_std", repr(result.auc_std)),
        ("nmi", repr(result.nmi)),
        ("nmi_fold_mean", repr(float(np.mean(result.fold_nmis)))),
    ]
    metrics += [(f"fold_{k}_auc", repr(a)) for k, a in enumerate(result.fold_aucs)]
    metrics += [(f"fold_{k}_nmi", repr(v)) for k, v in enumerate(result.fold_nmis)]
    metrics += [(f"fold_{k}_final_loss", repr(fr.epoch_losses[-1])) for k, fr in enumerate(result.fold_results)]
    metrics += [("n_acquisitions", str(len(dataset)))] + items
    write_report(out / "metrics.txt", echo, metrics)
    log.info("auc_mean %.4f  auc_std %.4f  nmi %.4f", result.auc_mean, result.auc_std, result.nmi)
    return EXIT_OK


def write_report(path, echo, metrics):
    lines = echo + [f"{k}: {v}" for k, v in metrics]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# evaluate / analyze


def _load_bound(args):
    manifest, atlas = _data_paths({"manifest": args.manifest, "atlas": args.atlas}, args)
    saved = load_network(args.model)
    dataset = load_dataset(manifest, atlas)
    cfg = saved.config.replace(workers=args.workers or 1)
    params = saved.params
    if hasattr(params, "theta") and (params.f_in != dataset.atlas.n or params.order != cfg.s):
        raise InvalidInputError(
            f"{args.model}: model expects n={params.f_in}, s={cfg.s}; dataset has n={dataset.atlas.n}"
        )
    net = bind_network(params, dataset, cfg)
    return saved, dataset, net, manifest, atlas


def cmd_evaluate(args):
    saved, dataset, net, manifest, atlas = _load_bound(args)
    labels = dataset.labels
    if args.held_out:
        idx = saved.test_indices
        if idx.size and idx.max() >= len(dataset):
            raise InvalidInputError("model's held-out indices do not fit this dataset")
    else:
        idx = np.arange(len(dataset))
    sub = labels[idx]
    p, q, y = pair_arrays(sub)
    p, q = idx[p], idx[q]
    scores = net.predict(p, q)
    n = len(idx)
    sim = np.eye(n)
    local = {int(a): i for i, a in enumerate(idx)}
    for a, b, s in zip(p, q, scores):
        sim[local[int(a)], local[int(b)]] = sim[local[int(b)], local[int(a)]] = s
    _, score = cluster_acquisitions(sim, sub, k=2, seed=saved.config.seed, restarts=saved.config.kmeans_restarts)
    items = [("model", args.model), ("manifest", manifest), ("atlas", atlas), ("held_out", str(bool(args.held_out)))]
    metrics = [
        ("auc", repr(auc(scores, y))),
        ("nmi", repr(score)),
        ("n_pairs", str(len(y))),
        ("n_matching", str(int(y.sum()))),
    ] + items + config_items(saved.config)
    echo = echo_block("evaluate", items)
    if args.out:
        write_report(args.out, echo, metrics)
    else:
        sys.stdout.write("\n".join(echo + [f"{k}: {v}" for k, v in metrics]) + "\n")
    return EXIT_OK


def cmd_analyze(args):
    if args.top_k < 1:
        raise UsageError("--top-k must be positive")
    try:
        ensure_dir(args.out)
    except OSError as exc:
        raise UsageError(str(exc)) from None
    saved, dataset, net, manifest, atlas = _load_bound(args)
    names = dataset.atlas.names
    items = [("model", args.model), ("manifest", manifest), ("atlas", atlas), ("top_k", str(args.top_k))]
    out = Path(args.out)
    a, b = dataset.class_names
    for group in (f"{a}-{a}", f"{b}-{b}", f"{a}-{b}"):
        report = roi_group_report(
            net.matching_features, dataset.labels, names, group, args.top_k, dataset.class_names
        )
        index = {name: i for i, name in enumerate(names)}
        for kind, ranked in (("similar", report.top_similar), ("dissimilar", report.top_dissimilar)):
            lines = echo_block("analyze", items + [("group", group), ("pairs", str(report.pair_count))])
            lines.append("rank\troi_name\tmean_similarity")
            lines += [
                f"{rank}\t{name}\t{float(report.mean_r[index[name]])!r}" for rank, name in enumerate(ranked, start=1)
            ]
            path = out / f"{group.lower()}_{kind}.tsv"
            path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    log.info("wrote ROI similarity reports to %s", out)
    return EXIT_OK


def cmd_gradcheck(args):
    if args.seeds < 1:
        raise UsageError("--seeds must be positive")
    if not 1e-7 <= args.epsilon <= 1e-4:
        raise UsageError("--epsilon must lie in [1e-7, 1e-4]")
    rows = gradcheck_suite(args.seeds, GRADCHECK_SHAPES, args.epsilon)
    worst = {}
    for shape, activation, pool, _, err in rows:
        key = (shape, activation, pool)
        worst[key] = max(worst.get(key, 0.0), err)
    for (shape, activation, pool), err in worst.items():
        print(f"n,M,s,F_out={shape}\t{activation}\t{pool}\tmax_rel_error={err:.3e}")
    overall = max(worst.values())
    print(f"max_relative_error: {overall:.6e}")
    print(f"instances: {len(rows)}")
    ok = overall < args.tol
    print("PASS" if ok else "FAIL", f"(tolerance {args.tol:g})")
    return EXIT_OK if ok else EXIT_FAILURE


# ---------------------------------------------------------------------------
# argument parsing


def _add_train_flags(p):
    p.add_argument("--model", choices=MODEL_KINDS, help="architecture (default mvgcn)")
    p.add_argument("--baseline", choices=BASELINE_KINDS, help="shorthand for --model with a vector baseline")
    p.add_argument("--pool", dest="pool_mode", choices=POOL_MODES, help="view pooling (default max)")
    p.add_argument("--activation", choices=ACTIVATIONS, help="after the graph conv (default identity)")
    p.add_argument("--s", type=int, help="Chebyshev order (default 30)")
    p.add_argument("--f-out", dest="f_out", type=int, help="output feature maps (default 128)")
    p.add_argument("--knn-k", dest="knn_k", type=int, help="neighbours in the geometry graph (default 10)")
    p.add_argument("--sigma", help="Gaussian width: a number or mean_distance (default)")
    p.add_argument("--lr", type=float, help="Adam learning rate (default 0.005)")
    p.add_argument("--epochs", type=int, help="default 20")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="default 256")
    p.add_argument("--folds", type=int, help="cross-validation folds (default 5)")
    p.add_argument("--seed", type=int, help="the single source of randomness (default 0)")
    p.add_argument("--view", type=int, help="view index for single-view models (default 0)")
    p.add_argument("--pca-dim", dest="pca_dim", type=int, help="PCA baseline width (default 100)")
    p.add_argument("--fcn-dims", dest="fcn_dims", type=int, nargs=2, metavar=("ENC", "HEAD"),
                   help="FCN baseline widths (default 1024 64)")
    p.add_argument("--pairs-per-epoch", dest="pairs_per_epoch", type=int,
                   help="cap on training pairs per epoch; 0 = all (default)")
    p.add_argument("--kmeans-restarts", dest="kmeans_restarts", type=int, help="default 10")


def _add_data_flags(p):
    p.add_argument("--data", help="directory holding manifest.tsv and atlas.tsv")
    p.add_argument("--manifest", help="manifest file")
    p.add_argument("--atlas", help="atlas file")


def build_parser():
    parser = argparse.ArgumentParser(prog="mvgcn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a seeded synthetic dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--config", help="key = value settings file")
    g.add_argument("--n", type=int, help="ROI count (default 20)")
    g.add_argument("--views", dest="m", type=int, help="views per acquisition (default 3)")
    g.add_argument("--per-class", dest="n_per_class", type=int, nargs=2, metavar=("PD", "HC"),
                   help="acquisitions per class (default 30 30)")
    g.add_argument("--separation", dest="class_separation", type=float, help="class signal in [0, 1] (default 0.8)")
    g.add_argument("--noise", type=float, help="element-wise noise scale (default 0.1)")
    g.add_argument("--seed", type=int, help="default 0")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="cross-validated training with metrics, models and similarity matrix")
    _add_data_flags(t)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--config", help="key = value settings file")
    t.add_argument("--workers", type=int, help="threads for pair evaluation; results do not depend on it")
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="AUC and NMI of a saved fold model on a dataset")
    e.add_argument("--model", required=True, help="fold_K.model written by train")
    _add_data_flags(e)
    e.add_argument("--held-out", action="store_true", help="score only the fold's held-out acquisitions")
    e.add_argument("--out", help="report file (default stdout)")
    e.add_argument("--workers", type=int)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("analyze", help="top similar / dissimilar ROIs per class group")
    a.add_argument("--model", required=True, help="fold_K.model written by train")
    _add_data_flags(a)
    a.add_argument("--out", required=True, help="output directory for the TSV reports")
    a.add_argument("--top-k", dest="top_k", type=int, default=10)
    a.add_argument("--workers", type=int)
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--epsilon", type=float, default=1e-5)
    c.add_argument("--tol", type=float, default=1e-5)
    c.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="mvgcn: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (InvalidInputError, OSError, ValueError) as exc:
        print(f"mvgcn: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
