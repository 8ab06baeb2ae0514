"""Run orchestration shared by the command line and the estimator wrappers:
data preparation from a config, training, evaluation and run-directory I/O.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import datasets as ds
from .config import ExperimentConfig, SeedPlan
from .metrics import (
    EvalReport,
    MineConfig,
    UnsupportedMetricError,
    class_conditional_baseline_rmse,
    conditional_marginal_rmse,
    delta_bayes,
    eval_kl_analytic_parametric,
    eval_nll,
    marginal_rmse,
    mi_zw,
    posterior_params,
    reconstruct,
)
from .model import ConditionalVAENet, DiscoverNet, IntegrityError, build_model, load_checkpoint, save_checkpoint
from .training import TrainReport, fit

logger = logging.getLogger(__name__)

OUT_ROOT_ENV = "DISCOVER_OUT"
KNOWN_METRICS = ("nll", "kl_analytic", "delta_bayes", "delta_bayes_latent", "mi", "marginal_rmse")


@dataclass
class Splits:
    train: ds.LabeledData
    val: ds.LabeledData
    test: ds.LabeledData


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, "runs"))


# -- data -----------------------------------------------------------------------------


def _digit_source(cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    spec = cfg.dataset
    if spec.images_path:
        images = ds.parse_idx(spec.images_path)
        labels = (ds.parse_idx(spec.labels_path) if spec.labels_path
                  else np.full(images.shape[0], -1, dtype=np.int64))
        if labels.shape[0] != images.shape[0]:
            raise ds.IDXFormatError(f"{spec.labels_path}: {labels.shape[0]} labels for "
                                    f"{images.shape[0]} images")
        images, labels = images[: spec.n_images], labels[: spec.n_images]
    else:
        raw, labels = ds.bundled_digits(spec.n_images)
        images = raw.astype(np.float32) / 255.0
    return images, labels


def make_splits(cfg: ExperimentConfig, seeds: SeedPlan | None = None) -> Splits:
    """Training/validation/test data for a config; test data uses its own
    seed stream, so it never overlaps the training draw."""
    seeds = seeds or SeedPlan.from_master(cfg.seed)
    spec = cfg.dataset
    if spec.kind == "parametric":
        full = ds.gen_parametric(spec.n, seeds.data)
        test = ds.gen_parametric(spec.n_test, seeds.test_data)
    elif spec.kind == "swiss_roll":
        full = ds.gen_swiss_roll(spec.n, spec.noise_rate, seeds.data, spec.jitter, spec.standardize)
        test = ds.gen_swiss_roll(spec.n_test, spec.noise_rate, seeds.test_data, spec.jitter,
                                 spec.standardize)
    else:
        images, labels = _digit_source(cfg)
        order = np.random.default_rng([seeds.data, 1]).permutation(images.shape[0])
        n_test_images = max(1, spec.n_test // 2)
        if n_test_images >= images.shape[0]:
            raise ValueError("dataset.n_test leaves no training images")
        te_idx, tr_idx = order[:n_test_images], order[n_test_images:]
        full = ds.colorize_and_flip(images[tr_idx], spec.noise_rate, seeds.data,
                                    spec.downsample_to, labels[tr_idx])
        test = ds.colorize_and_flip(images[te_idx], spec.noise_rate, seeds.test_data,
                                    spec.downsample_to, labels[te_idx])
    n = len(full)
    perm = np.random.default_rng([seeds.data, 2]).permutation(n)
    n_val = max(1, int(round(spec.val_fraction * n)))
    return Splits(full.subset(np.sort(perm[n_val:])), full.subset(np.sort(perm[:n_val])), test)


def bayes_accuracy(cfg: ExperimentConfig) -> float:
    if cfg.dataset.kind == "parametric":
        return ds.parametric_bayes_accuracy()
    if cfg.dataset.kind == "swiss_roll":
        return 1.0 - cfg.dataset.noise_rate
    raise UnsupportedMetricError("no analytic Bayes accuracy for colored digits")


# -- training -------------------------------------------------------------------------


def build_from_config(cfg: ExperimentConfig, n_features: int, n_classes: int = 2,
                      seeds: SeedPlan | None = None):
    seeds = seeds or SeedPlan.from_master(cfg.seed)
    m = cfg.model
    return build_model(m.kind, n_features, n_classes, m.d_latent, m.n_hidden, m.d_hidden,
                       np.random.default_rng(seeds.init), cfg.likelihood, m.activation)


def train_model(cfg: ExperimentConfig, splits: Splits | None = None, epoch_callback=None):
    """Build and fit the configured model; returns (model, report, splits)."""
    seeds = SeedPlan.from_master(cfg.seed)
    splits = splits or make_splits(cfg, seeds)
    model = build_from_config(cfg, splits.train.x.shape[1], 2, seeds)
    report = fit(model, (splits.train.x, splits.train.y), (splits.val.x, splits.val.y),
                 cfg.weights, cfg.train, np.random.default_rng(seeds.train), epoch_callback)
    return model, report, splits


# -- evaluation -----------------------------------------------------------------------


def evaluate(cfg: ExperimentConfig, model, splits: Splits, metrics: list[str] | None = None
             ) -> EvalReport:
    """Compute the requested metrics on the held-out test split."""
    metrics = list(metrics or cfg.metrics.enabled)
    unknown = [m for m in metrics if m not in KNOWN_METRICS]
    if unknown:
        raise UnsupportedMetricError(f"unknown metric(s): {', '.join(unknown)}")
    seeds = SeedPlan.from_master(cfg.seed)
    test = splits.test
    rep = EvalReport()
    if "nll" in metrics:
        rep.nll, rep.nll_se = eval_nll(model, test.x, test.y, cfg.metrics.nll_samples, seeds.metric)
    if "kl_analytic" in metrics:
        kl = eval_kl_analytic_parametric(model, test.x, test.y, cfg.dataset.kind,
                                         cfg.metrics.kl_quad_points)
        rep.kl_z = kl["kl_z"]
        rep.kl_w = kl.get("kl_w", math.nan)
        rep.extras.update({k: v for k, v in kl.items() if not k.endswith("per_sample")})
    if "delta_bayes" in metrics:
        rep.delta_bayes, rep.delta_bayes_se = delta_bayes(model, test.x, test.y,
                                                          bayes_accuracy(cfg), seeds.metric)
    if "delta_bayes_latent" in metrics:
        rep.extras["delta_bayes_latent"] = delta_bayes(model, test.x, test.y, bayes_accuracy(cfg),
                                                       seeds.metric, features="latent")[0]
    if "mi" in metrics:
        n = min(cfg.metrics.mine_samples, len(test))
        mi = mi_zw(model, test.x[:n], test.y[:n],
                   MineConfig(epochs=cfg.metrics.mine_epochs, seed=seeds.metric),
                   seed=seeds.metric)
        rep.mi_zw = mi["clamped"]
        rep.extras["mi_zw_raw"] = mi["raw"]
    if "marginal_rmse" in metrics:
        if cfg.dataset.kind != "colored_digits":
            raise UnsupportedMetricError("marginal RMSE needs a known true marginal "
                                         "(colored digits)")
        true_marginal = test.extras["marginal"]
        if isinstance(model, ConditionalVAENet):
            rep.marginal_rmse = conditional_marginal_rmse(model, test.x, test.y, true_marginal)
        else:
            rep.marginal_rmse = marginal_rmse(model, test.x, test.y, true_marginal)
        blue = test.x.reshape(len(test), -1, 3)[:, :, 2]
        rep.extras["baseline_rmse"] = class_conditional_baseline_rmse(blue, cfg.dataset.noise_rate)
    rep.check()
    return rep


# -- run directories ------------------------------------------------------------------


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def save_run(run_dir: Path, cfg: ExperimentConfig, model, report: TrainReport) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.to_json())
    save_checkpoint(model, run_dir, "checkpoint")
    report.write_csv(run_dir / "epochs.csv")
    write_json(run_dir / "report.json", report.to_dict())
    checksums = {name: sha256_file(run_dir / name)
                 for name in ("config.json", "checkpoint.json", "checkpoint.bin", "epochs.csv",
                              "report.json")}
    write_json(run_dir / "checksums.json", checksums)


def load_run(run_dir: Path):
    """(config, model) from a run directory; verifies recorded checksums."""
    run_dir = Path(run_dir)
    for required in ("config.json", "checkpoint.json", "checkpoint.bin"):
        if not (run_dir / required).exists():
            raise FileNotFoundError(f"{run_dir}: missing {required}")
    cfg = ExperimentConfig.load(run_dir / "config.json")
    sums_path = run_dir / "checksums.json"
    if sums_path.exists():
        sums = json.loads(sums_path.read_text())
        for name in ("config.json", "checkpoint.json", "checkpoint.bin"):
            if name in sums and sha256_file(run_dir / name) != sums[name]:
                raise IntegrityError(f"{run_dir / name}: checksum does not match checksums.json")
    model = load_checkpoint(run_dir, "checkpoint")
    expected = cfg.model
    if (model.d_latent != expected.d_latent or type(model).__name__ !=
            build_from_config(cfg, model.n_features).__class__.__name__):
        raise IntegrityError(f"{run_dir}: checkpoint does not match config.json")
    return cfg, model


def append_results_csv(path: Path, experiment: str, seed: int, report: EvalReport) -> None:
    row = {"experiment": experiment, "seed": seed}
    for k, v in report.to_dict().items():
        if k == "extras":
            continue
        row[k] = v
    for k, v in sorted(report.extras.items()):
        if isinstance(v, (int, float)):
            row[k] = v
    path = Path(path)
    existing: list[dict] = []
    if path.exists():
        with open(path, newline="") as fh:
            existing = [r for r in csv.DictReader(fh)
                        if not (r["experiment"] == experiment and r["seed"] == str(seed))]
    cols = list(dict.fromkeys([c for r in existing for c in r] + list(row)))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for r in existing + [row]:
            writer.writerow(r)


def export_plotdata(run_dir: Path, out_dir: Path | None = None) -> list[Path]:
    """Embedding scatter, reconstructions, metric curves (and, for parametric
    runs, analytic posterior curves) as CSV/JSON files."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir() or not (run_dir / "checkpoint.json").exists():
        raise FileNotFoundError(f"{run_dir}: no completed run (checkpoint.json missing)")
    cfg, model = load_run(run_dir)
    out_dir = Path(out_dir or run_dir / "export")
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = make_splits(cfg)
    test = splits.test.subset(slice(0, min(5000, len(splits.test))))
    mz, vz, mw, vw = posterior_params(model, test.x, test.y)
    written = []

    cols = [f"x{i + 1}" for i in range(test.x.shape[1])] if test.x.shape[1] <= 8 else []
    header = cols + ["y"] + [f"z{i + 1}" for i in range(mz.shape[1])]
    rows = [test.x[:, :len(cols)], test.y[:, None], mz]
    if mw is not None:
        header += [f"w{i + 1}" for i in range(mw.shape[1])]
        rows.append(mw)
    path = out_dir / "embedding.csv"
    np.savetxt(path, np.hstack([np.asarray(r, np.float64) for r in rows]), delimiter=",",
               header=",".join(header), comments="", fmt="%.7g")
    written.append(path)

    recs = reconstruct(model, test.x, test.y)
    n_grid = min(64, len(test))
    grid = {k: v[:n_grid].tolist() for k, v in recs.items()}
    grid["x"] = test.x[:n_grid].tolist()
    grid["y"] = test.y[:n_grid].tolist()
    if "height" in test.meta:
        grid["image_shape"] = [test.meta["height"], test.meta["width"], 3]
    path = out_dir / "reconstructions.json"
    write_json(path, grid)
    written.append(path)

    if (run_dir / "epochs.csv").exists():
        path = out_dir / "curves.csv"
        path.write_text((run_dir / "epochs.csv").read_text())
        written.append(path)

    if cfg.dataset.kind == "parametric":
        from .distributions import TruncGaussian1D

        xs = np.linspace(-3, 3, 61, dtype=np.float32)[:, None]
        rows = []
        for yv in (0, 1):
            yy = np.full(len(xs), yv)
            pz_m, pz_v, pw_m, pw_v = posterior_params(model, xs, yy)
            for i, xv in enumerate(xs[:, 0]):
                t = TruncGaussian1D.parametric_posterior(float(xv), yv)
                ws = np.linspace(-4, 4, 801)
                pdf = t.pdf(ws)
                true_w_mean = float(np.trapezoid(ws * pdf, ws))
                rows.append([xv, yv, pz_m[i, 0], pz_v[i, 0], xv / 2, 0.5,
                             pw_m[i, 0] if pw_m is not None else math.nan,
                             pw_v[i, 0] if pw_v is not None else math.nan, true_w_mean])
        path = out_dir / "posterior_curves.csv"
        np.savetxt(path, np.asarray(rows, np.float64), delimiter=",", fmt="%.7g", comments="",
                   header="x,y,q_z_mean,q_z_var,p_z_mean,p_z_var,q_w_mean,q_w_var,p_w_mean")
        written.append(path)
    return written
