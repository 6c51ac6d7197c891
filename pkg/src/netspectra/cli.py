"""Command-line entry point: ``netspectra {train,hessian,analyze} CONFIG ...``.

Exit codes: 0 success, 2 configuration or usage error, 3 I/O or corrupt
input, 4 numerical failure. ``NETSPECTRA_WORKERS`` caps BLAS threads.
"""

from __future__ import annotations

import os

_WORKERS = os.environ.get("NETSPECTRA_WORKERS")
if _WORKERS:
    # must happen before numpy loads its BLAS
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _WORKERS)

import argparse
import hashlib
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, continual, hessian, io, pca, rmt, spectra
from .config import ConfigError, RunConfig, derive_seed, load_config
from .data import Dataset, IdxFormatError, load_idx, synth_blobs
from .trainer import (
    METRIC_COLUMNS,
    DivergenceError,
    Schedule,
    TrainConfig,
    load_checkpoint,
    metrics_rows,
    save_checkpoint,
    train,
)
from .nn import Network, init_network

log = logging.getLogger("netspectra")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

ANALYSES = (
    "pca", "svd", "overlap", "weight-product", "add-acc", "slice", "scaling",
    "concentration", "ipr", "porter-thomas", "density", "drift", "forget",
)

# input files each analysis needs, checked before any compute
REQUIRED_INPUTS = {
    "pca": ("trajectory",),
    "svd": ("checkpoint",),
    "overlap": ("basis", "basis2"),
    "weight-product": ("checkpoint", "basis"),
    "add-acc": ("checkpoint", "basis"),
    "slice": ("checkpoint", "basis"),
    "scaling": ("checkpoint",),
    "concentration": ("basis",),
    "ipr": ("basis",),
    "porter-thomas": ("basis",),
    "density": ("basis",),
    "drift": ("trajectory",),
    "forget": (),
}


class InputError(Exception):
    """Missing or unreadable input files (exit 3)."""


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: RunConfig, outputs: list[Path], extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg.echo(),
        "outputs": {p.name: git_blob_hash(p.read_bytes()) for p in outputs},
    }
    if extra:
        manifest.update(extra)
    path = out_dir / f"manifest-{command}.json"
    io.write_json(path, manifest)
    return path


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset | None]:
    d = cfg["data"]
    if d["source"] == "idx":
        train_set = load_idx(d["train_images"], d["train_labels"], d["classes"])
        test_set = None
        if d["test_images"] and d["test_labels"]:
            test_set = load_idx(d["test_images"], d["test_labels"], d["classes"])
    else:
        total = synth_blobs(
            d["classes"], d["dim"], d["per_class"] + d["test_per_class"], d["separation"],
            seed=derive_seed(cfg.get("run", "seed"), "data"),
        )
        total = Dataset(total.inputs + d["offset"], total.labels, d["classes"])
        n_train = d["classes"] * d["per_class"]
        train_set = total.subset(np.arange(n_train))
        test_set = total.subset(np.arange(n_train, len(total))) if d["test_per_class"] else None
    if d["train_limit"]:
        train_set = train_set.head(d["train_limit"])
    return train_set, test_set


def train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        schedule=Schedule(t["schedule"], t["lr"], t["decay"], t["points"]),
        momentum=t["momentum"],
        weight_decay=t["weight_decay"],
        batch_size=t["batch_size"],
        epochs=t["epochs"],
        seed=derive_seed(cfg.get("run", "seed"), "shuffle"),
        record=t["record"],
        record_start_epoch=t["record_start_epoch"],
        trainable=t["trainable"],
    )


def output_dir(cfg: RunConfig, override: str | None) -> Path:
    out = Path(override or cfg.get("run", "output_dir"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _check_dims(net: Network, cfg: RunConfig, dataset: Dataset) -> None:
    dims = cfg.get("network", "dims")
    if dims[0] != dataset.dim:
        raise ConfigError(f"network.dims starts with {dims[0]} but the data has {dataset.dim} features")
    if dims[-1] != dataset.class_count:
        raise ConfigError(f"network.dims ends with {dims[-1]} but the data has {dataset.class_count} classes")


# --- commands --------------------------------------------------------------


def cmd_train(cfg: RunConfig, args) -> int:
    train_set, test_set = load_data(cfg)
    dims = cfg.get("network", "dims")
    net = init_network(dims, cfg.get("network", "init"), derive_seed(cfg.get("run", "seed"), "init"))
    _check_dims(net, cfg, train_set)
    config = train_config(cfg)
    net, trajectory, metrics = train(net, train_set, config, test_set)
    out = output_dir(cfg, args.out)
    steps = int(trajectory.times[-1]) if len(trajectory) else None
    paths = [out / "checkpoint.bin", out / "trajectory.bin", out / "metrics.csv"]
    save_checkpoint(net, paths[0], seed=cfg.get("run", "seed"), step=steps)
    save_checkpoint(trajectory, paths[1], seed=cfg.get("run", "seed"), step=steps)
    io.write_csv(paths[2], METRIC_COLUMNS, metrics_rows(metrics))
    write_manifest(out, "train", cfg, paths)
    last = metrics[-1] if metrics else None
    if last is not None:
        print(f"trained {net.n_params} parameters for {len(metrics)} epochs: "
              f"train_acc={last.train_acc:.4f} test_acc={last.test_acc:.4f}")
    return EXIT_OK


def _hessian_data(cfg: RunConfig) -> Dataset:
    train_set, _ = load_data(cfg)
    subset = cfg.get("hessian", "subset")
    return train_set.head(subset) if subset else train_set


def cmd_hessian(cfg: RunConfig, args) -> int:
    _require(args, ("checkpoint",))
    net = _load_network(args.checkpoint, cfg)
    data = _hessian_data(cfg)
    h = cfg["hessian"]
    mode = args.mode or h["mode"]
    k = args.k or h["k"]
    wd = cfg.get("train", "weight_decay")
    indices = net.layout.scope_indices(h["scope"])
    size = len(indices)
    if mode == "dense":
        if size > h["cap"]:
            raise ConfigError(
                f"{size} parameters exceed the dense cap of {h['cap']}; rerun with --mode lanczos --k {k}"
            )
        dense = hessian.dense_hessian(net, data.inputs, data.labels, wd, h["cap"], indices)
        basis = hessian.eigh(dense.matrix, ordering=cfg.get("analysis", "ordering"))
    else:
        basis = hessian.lanczos_topk(
            hessian.hvp_operator(net, data.inputs, data.labels, wd, indices), size, k,
            max_iters=h["max_iters"] or None, seed=derive_seed(cfg.get("run", "seed"), "lanczos"),
        )
    out = output_dir(cfg, args.out)
    paths = [out / "eigenbasis.bin", out / "eigenvalues.csv"]
    hessian.save_eigenbasis(basis, paths[0])
    io.write_csv(paths[1], ("index", "eigenvalue"), enumerate(basis.values))
    write_manifest(out, "hessian", cfg, paths, {"mode": mode, "n": size, "k": len(basis)})
    top = ", ".join(f"{v:.6g}" for v in basis.values[:5])
    print(f"n={size} k={len(basis)} top5=[{top}]")
    return EXIT_OK


def _require(args, names) -> None:
    missing = [f"--{n}" for n in names if not getattr(args, n, None)]
    if missing:
        raise ConfigError(f"missing required inputs: {', '.join(missing)}")
    absent = [str(getattr(args, n)) for n in names if not Path(getattr(args, n)).is_file()]
    if absent:
        raise InputError(f"input files not found: {', '.join(absent)}")


def _load_network(path, cfg: RunConfig) -> Network:
    obj = load_checkpoint(path, cfg.get("network", "dims"))
    if not isinstance(obj, Network):
        raise io.CorruptFileError(f"{path}: expected a network checkpoint")
    return obj


def _load_trajectory(path):
    obj = load_checkpoint(path)
    if isinstance(obj, Network):
        raise io.CorruptFileError(f"{path}: expected a trajectory file")
    return obj


def _scoped(net: Network, basis: hessian.EigenBasis, scope) -> np.ndarray:
    idx = net.layout.scope_indices(scope)
    if basis.dim != len(idx):
        raise ConfigError(
            f"basis vectors have length {basis.dim} but analysis.scope selects {len(idx)} parameters"
        )
    return idx


def cmd_analyze(cfg: RunConfig, args) -> int:
    kind = args.kind
    _require(args, REQUIRED_INPUTS[kind])
    a = cfg["analysis"]
    out = output_dir(cfg, args.out)
    wd = cfg.get("train", "weight_decay")
    name = kind.replace("-", "_")
    paths: list[Path] = []
    extra: dict = {}

    def csv(stem, columns, rows):
        path = out / f"{stem}.csv"
        io.write_csv(path, columns, rows)
        paths.append(path)

    if kind == "pca":
        traj = _load_trajectory(args.trajectory)
        result = pca.trajectory_pca(traj, a["use"])
        csv("pca", ("index", "variance"), enumerate(result.variances))
        comps = result.components[: a["components"]]
        thetas = np.column_stack([pca.project(getattr(traj, a["use"]), p) for p in comps])
        csv("pca_theta", ("time", *[f"theta_{i}" for i in range(len(comps))]),
            [(t, *row) for t, row in zip(traj.times, thetas)])
        basis_path = out / "pca_basis.bin"
        hessian.save_eigenbasis(
            hessian.EigenBasis(result.variances, result.components, f"pca-{a['use']}"), basis_path
        )
        paths.append(basis_path)
    elif kind == "svd":
        net = _load_network(args.checkpoint, cfg)
        values, summary, pooled = [], [], []
        for layer in range(net.layout.n_layers):
            w = net.weight(layer)
            bundle = rmt.bulk_analysis(rmt.svd(w), w, a["mp_estimator"])
            for i, (nu, lam, bulk) in enumerate(zip(bundle.singular_values, bundle.mapped, bundle.in_bulk)):
                values.append((layer, i, nu, lam, bool(bulk)))
            summary.append((layer, *w.shape, bundle.q, bundle.sigma2_mp, *bundle.bounds, *bundle.singular_bounds,
                            bundle.n_out, rmt.mp_ks_distance(bundle)))
            if len(bundle.singular_values) >= 3:
                pooled.append(rmt.unfold_spacings(bundle.singular_values, a["k_neighbors"]))
        csv("svd", ("layer", "index", "singular_value", "mapped", "in_bulk"), values)
        csv("svd_summary", ("layer", "rows", "cols", "q", "sigma2", "lambda_minus", "lambda_plus", "nu_minus", "nu_plus",
                            "n_out", "ks_mp"),
            summary)
        if pooled:
            spacings = np.concatenate(pooled)
            csv("svd_spacings", ("s", "empirical", "wigner"), rmt.spacing_histogram(spacings))
            extra["wigner_ks"] = rmt.wigner_ks(spacings)
    elif kind == "overlap":
        first, second = hessian.load_eigenbasis(args.basis), hessian.load_eigenbasis(args.basis2)
        m = spectra.overlap(first, second).entries
        csv("overlap", ("row", *[f"col_{j}" for j in range(m.shape[1])]), [(i, *r) for i, r in enumerate(m)])
    elif kind == "weight-product":
        net = _load_network(args.checkpoint, cfg)
        basis = hessian.load_eigenbasis(args.basis)
        idx = _scoped(net, basis, a["scope"])
        prod = spectra.weight_product(basis, net.params[idx])
        csv("weight_product", ("index", "eigenvalue", "product"), zip(range(len(basis)), basis.values, prod))
    elif kind == "add-acc":
        net = _load_network(args.checkpoint, cfg)
        basis = hessian.load_eigenbasis(args.basis)
        idx = _scoped(net, basis, a["scope"])
        data = _eval_data(cfg)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", spectra.IncompleteBasisWarning)
            curve = spectra.add_eigvec_curve(net, basis, data.inputs, data.labels, a["ordering"], idx,
                                             weight_decay=wd)
        csv("add_acc", ("count", "accuracy", "loss"), zip(curve.counts, curve.accuracy, curve.loss))
        extra["complete"] = curve.complete
    elif kind == "slice":
        net = _load_network(args.checkpoint, cfg)
        basis = hessian.load_eigenbasis(args.basis).reordered(a["ordering"])
        idx = _scoped(net, basis, a["scope"])
        data = _eval_data(cfg)
        rows = []
        for i in range(min(a["slice_count"], len(basis))):
            h = basis.vectors[i]
            center = float(net.params[idx] @ h)
            grid = spectra.default_slice_grid(center, a["slice_half_width"], a["slice_points"])
            sl = spectra.loss_slice(net, h, data.inputs, data.labels, grid, basis.values[i], idx, wd)
            rows.extend((i, basis.values[i], al, lo, ac, q)
                        for al, lo, ac, q in zip(sl.alphas, sl.loss, sl.accuracy, sl.quadratic))
        csv("slice", ("index", "eigenvalue", "alpha", "loss", "accuracy", "quadratic"), rows)
    elif kind == "scaling":
        net = _load_network(args.checkpoint, cfg)
        data = _eval_data(cfg)
        alphas = np.linspace(a["scaling_min"], a["scaling_max"], a["scaling_points"])
        table = spectra.loss_scaling(net, alphas, data.inputs, data.labels, a["scope"], wd)
        csv("scaling", ("alpha", "loss", "data_loss", "penalty"),
            zip(table.alphas, table.loss, table.data_loss, table.penalty))
    elif kind == "concentration":
        basis = hessian.load_eigenbasis(args.basis)
        layout = init_network(cfg.get("network", "dims")).layout
        if basis.dim != layout.size:
            raise ConfigError(f"concentration needs full-network vectors of length {layout.size}, got {basis.dim}")
        expected = spectra.parameter_fractions(layout)
        rows = [(-1, float("nan"), *expected)]
        rows += [(i, v, *spectra.layer_concentration(h, layout)) for i, (v, h) in enumerate(zip(basis.values, basis.vectors))]
        csv("concentration", ("index", "eigenvalue", *[f"layer_{l}" for l in range(layout.n_layers)]), rows)
    elif kind == "ipr":
        basis = hessian.load_eigenbasis(args.basis)
        csv("ipr", ("index", "eigenvalue", "ipr"),
            [(i, v, spectra.ipr(h)) for i, (v, h) in enumerate(zip(basis.values, basis.vectors))])
    elif kind == "porter-thomas":
        basis = hessian.load_eigenbasis(args.basis)
        csv("porter_thomas", ("index", "eigenvalue", "pvalue"),
            [(i, v, spectra.porter_thomas_pvalue(h)) for i, (v, h) in enumerate(zip(basis.values, basis.vectors))])
    elif kind == "density":
        basis = hessian.load_eigenbasis(args.basis)
        grid, dens = spectra.spectral_density(basis.values, a["density_width"])
        csv("density", ("value", "density"), zip(grid, dens))
    elif kind == "drift":
        traj = _load_trajectory(args.trajectory)
        lo, hi = a["window_lo"], a["window_hi"] or len(traj)
        snaps = getattr(traj, a["use"])[lo:hi]
        result = pca.covariance(snaps, source=a["use"])
        theta = pca.project(snaps, result.components[0])
        fit = pca.drift_fit(theta, a["drift_t0"])
        count = int(np.sum(np.arange(len(theta)) >= a["drift_t0"]))
        summary = {
            **fit.to_dict(),
            "samples": count,
            "sigma2_measured": float(result.variances[0]),
            "sigma2_linear": pca.linear_drift_variance(fit.slope, count),
        }
        json_path = out / "drift.json"
        io.write_json(json_path, summary)
        paths.append(json_path)
        csv("drift", ("index", "time", "theta", "fit"),
            [(i, t, th, fit.slope * (i - fit.t0) + fit.intercept)
             for i, (t, th) in enumerate(zip(traj.times[lo:hi], theta))])
    elif kind == "forget":
        results = _run_forget(cfg)
        rows = [r for res in results.values() for r in res.rows]
        csv("forget", continual.RESULT_COLUMNS, rows)
        extra["selected"] = {
            m: {"epoch": r.selected_epoch, "acc_task1": r.selected[0], "acc_task2": r.selected[1]}
            for m, r in results.items()
        }
        for m, r in results.items():
            print(f"{m}: epoch {r.selected_epoch} task1={r.selected[0]:.3f} task2={r.selected[1]:.3f}")
    write_manifest(out, f"analyze-{name}", cfg, paths, extra)
    return EXIT_OK


def _eval_data(cfg: RunConfig) -> Dataset:
    train_set, _ = load_data(cfg)
    limit = cfg.get("analysis", "eval_limit")
    return train_set.head(limit) if limit else train_set


def _run_forget(cfg: RunConfig) -> dict:
    d, f = cfg["data"], cfg["forget"]
    dims = cfg.get("network", "dims")
    if d["source"] != "synth":
        raise ConfigError("analyze forget runs on synthetic blobs; set data.source = synth")
    if dims[0] != d["dim"] or dims[-1] != d["classes"]:
        raise ConfigError("network.dims must start with data.dim and end with data.classes")
    unknown = [m for m in f["methods"] if m not in continual.METHODS]
    if unknown:
        raise ConfigError(f"unknown forget methods: {', '.join(unknown)}")
    setup = continual.ForgettingSetup(
        classes=d["classes"], dim=d["dim"], per_class=d["per_class"], separation=d["separation"],
        offset=d["offset"], hidden=tuple(dims[1:-1]), task_a=f["task_a"], task_b=f["task_b"],
        pretrain_epochs=f["pretrain_epochs"], task1_epochs=f["task1_epochs"], lr=f["lr"],
        lr_fraction=f["lr_fraction"], epochs=f["epochs"], lambda_cf=f["lambda_cf"], gamma=f["gamma"],
        hessian_budget=f["hessian_budget"], singular_budget=f["singular_budget"],
        bias_fraction=f["bias_fraction"], scope=f["scope"], batch_size=cfg.get("train", "batch_size"),
        seed=derive_seed(cfg.get("run", "seed"), "forget") % (2**31),
    )
    return continual.forgetting_experiment(setup, f["methods"])


# --- entry point -----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="netspectra", description="Spectral analysis of small dense networks.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a network; writes checkpoint, trajectory and metrics")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (default: run.output_dir)")

    p = sub.add_parser("hessian", help="Hessian eigenpairs of a checkpoint")
    p.add_argument("config")
    p.add_argument("--checkpoint", required=False)
    p.add_argument("--mode", choices=("dense", "lanczos"))
    p.add_argument("--k", type=int)
    p.add_argument("--out")

    p = sub.add_parser("analyze", help="run one analysis and write its CSV")
    p.add_argument("kind", choices=ANALYSES)
    p.add_argument("config")
    p.add_argument("--checkpoint")
    p.add_argument("--trajectory")
    p.add_argument("--basis", help="eigenbasis file")
    p.add_argument("--basis2", help="second eigenbasis file (overlap)")
    p.add_argument("--out")
    return parser


COMMANDS = {"train": cmd_train, "hessian": cmd_hessian, "analyze": cmd_analyze}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, io.CorruptFileError, IdxFormatError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DivergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
