"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 divergence, 4 integrity error
(checksum/manifest mismatch or missing run artifacts).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import datasets as ds
from .config import ConfigError, ExperimentConfig, SeedPlan, apply_overrides, preset, preset_names
from .experiment import (
    append_results_csv,
    default_out_root,
    evaluate,
    export_plotdata,
    load_run,
    make_splits,
    save_run,
    train_model,
    write_json,
)
from .metrics import UnsupportedMetricError
from .model import IntegrityError
from .training import DivergenceError

logger = logging.getLogger("discover")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_INTEGRITY = 0, 2, 3, 4


def _parse_overrides(tokens: list[str]) -> list[tuple[str, str]]:
    out, i = [], 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) < 3:
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"override --{key} needs a value")
            value = tokens[i + 1]
            i += 2
        out.append((key, value))
    return out


def _resolve_config(args, extra: list[str]) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = ExperimentConfig.load(args.config)
    else:
        cfg = preset(getattr(args, "preset", None) or "parametric")
    overrides = _parse_overrides(extra)
    if getattr(args, "seed", None) is not None:
        overrides.append(("seed", str(args.seed)))
    return apply_overrides(cfg, overrides) if overrides else cfg


def _run_dir(cfg: ExperimentConfig, out: str | None) -> Path:
    if out:
        return Path(out)
    if cfg.out_dir:
        return Path(cfg.out_dir)
    return default_out_root() / f"{cfg.name}-{cfg.model.kind}-seed{cfg.seed}"


def _train(cfg: ExperimentConfig, run_dir: Path, quiet: bool = False):
    t0 = time.time()

    def log_epoch(rec):
        if not quiet and (rec.epoch % 25 == 0):
            logger.info("epoch %d loss %.4f val %.4f nll %.4f", rec.epoch, rec.loss,
                        rec.val_loss, rec.val_nll)

    try:
        model, report, splits = train_model(cfg, epoch_callback=log_epoch)
    except DivergenceError as exc:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(cfg.to_json())
        exc.report.write_csv(run_dir / "epochs.csv")
        write_json(run_dir / "report.json", exc.report.to_dict())
        raise
    save_run(run_dir, cfg, model, report)
    logger.info("trained %s in %.1fs (%d epochs, %s) -> %s", cfg.name, time.time() - t0,
                report.epochs_run, report.stop_reason, run_dir)
    return model, report, splits


def _eval(cfg, model, splits, run_dir: Path, metrics, results: Path | None):
    rep = evaluate(cfg, model, splits, metrics)
    write_json(run_dir / "eval.json", rep.to_dict())
    results = results or run_dir.parent / "results.csv"
    append_results_csv(results, f"{cfg.name}/{cfg.model.kind}", cfg.seed, rep)
    return rep


def cmd_train(args, extra) -> int:
    cfg = _resolve_config(args, extra)
    run_dir = _run_dir(cfg, args.out)
    model, report, splits = _train(cfg, run_dir)
    print(json.dumps({"run_dir": str(run_dir), "epochs": report.epochs_run,
                      "stop_reason": report.stop_reason,
                      "best_val_loss": report.best_val_loss}))
    if args.eval:
        rep = _eval(cfg, model, splits, run_dir, None, None)
        print(json.dumps(rep.to_dict(), default=float))
    return EXIT_OK


def cmd_eval(args, extra) -> int:
    if extra:
        raise ConfigError(f"unexpected arguments: {' '.join(extra)}")
    run_dir = Path(args.run_dir)
    cfg, model = load_run(run_dir)
    metrics = args.metrics.split(",") if args.metrics else None
    splits = make_splits(cfg)
    rep = _eval(cfg, model, splits, run_dir, metrics, Path(args.results) if args.results else None)
    print(json.dumps(rep.to_dict(), default=float))
    return EXIT_OK


def cmd_gen_data(args, extra) -> int:
    cfg = _resolve_config(args, extra)
    seeds = SeedPlan.from_master(cfg.seed)
    spec = cfg.dataset
    if spec.kind == "parametric":
        data = ds.gen_parametric(spec.n, seeds.data)
    elif spec.kind == "swiss_roll":
        data = ds.gen_swiss_roll(spec.n, spec.noise_rate, seeds.data, spec.jitter, spec.standardize)
    else:
        splits = make_splits(cfg, seeds)
        data = splits.train
    out = Path(args.out) if args.out else default_out_root() / f"data-{cfg.name}-seed{cfg.seed}"
    record = {"dataset": json.loads(json.dumps(cfg.dataset.__dict__)), "seed": cfg.seed,
              "data_seed": seeds.data}
    try:
        manifest = ds.save_dataset(data, out, spec=record)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc.strerror}") from exc
    sha = json.loads(manifest.read_text())["blob_sha256"]
    print(json.dumps({"manifest": str(manifest), "blob_sha256": sha, "n": len(data)}))
    return EXIT_OK


def cmd_export(args, extra) -> int:
    if extra:
        raise ConfigError(f"unexpected arguments: {' '.join(extra)}")
    paths = export_plotdata(Path(args.run_dir), Path(args.out) if args.out else None)
    print(json.dumps([str(p) for p in paths]))
    return EXIT_OK


# -- reproduction tables ---------------------------------------------------------------


def _fmt_ms(values: list[float], digits: int) -> str:
    v = np.asarray([x for x in values if x is not None and not math.isnan(x)], dtype=np.float64)
    if v.size == 0:
        return "n/a"
    sd = v.std(ddof=1) if v.size > 1 else 0.0
    return f"{v.mean():.{digits}f} ± {sd:.{digits}f}"


def _repro(base: ExperimentConfig, models: list[str], seeds: list[int], out_root: Path,
           columns: list[tuple[str, str, int, float]], extra_overrides: list[tuple[str, str]]
           ) -> str:
    """Train/evaluate every (model, seed); return a markdown table of mean ± SD."""
    results: dict[str, list] = {}
    for kind in models:
        for seed in seeds:
            cfg = apply_overrides(base, [("model.kind", json.dumps(kind)), ("seed", str(seed)),
                                         *extra_overrides])
            if kind != "discover":
                enabled = [m for m in cfg.metrics.enabled
                           if not (m == "mi" or (m == "delta_bayes" and kind == "plain_vae"))]
                cfg = apply_overrides(cfg, [("metrics.enabled", json.dumps(enabled))])
            run_dir = out_root / f"{cfg.name}-{kind}-seed{seed}"
            model, _, splits = _train(cfg, run_dir, quiet=True)
            rep = _eval(cfg, model, splits, run_dir, None, out_root / "results.csv")
            results.setdefault(kind, []).append(rep)
    header = "| model | " + " | ".join(c[0] for c in columns) + " |"
    lines = [header, "|" + "---|" * (len(columns) + 1)]
    for kind, reps in results.items():
        cells = []
        for _, attr, digits, scale in columns:
            vals = [(getattr(r, attr, None) if hasattr(r, attr) else r.extras.get(attr)) for r in reps]
            vals = [None if v is None else v * scale for v in vals]
            cells.append(_fmt_ms(vals, digits))
        lines.append(f"| {kind} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def _repro_cmd(args, extra, name: str, models: list[str], columns, noise_rates=None) -> int:
    base = _resolve_config(argparse.Namespace(config=args.config, preset=name, seed=None), extra)
    out_root = Path(args.out) if args.out else default_out_root() / f"repro-{name}"
    out_root.mkdir(parents=True, exist_ok=True)
    seeds = list(range(args.seed_start, args.seed_start + args.seeds))
    models = args.models.split(",") if args.models else models
    tables = []
    for rho in noise_rates or [None]:
        over = [] if rho is None else [("dataset.noise_rate", str(rho))]
        table = _repro(base, models, seeds, out_root / (f"rho{rho:g}" if rho is not None else ""),
                       columns, over)
        tables.append((f"noise_rate = {rho:g}\n\n" if rho is not None else "") + table)
    text = "\n".join(tables)
    (out_root / "table.md").write_text(text)
    print(text)
    return EXIT_OK


def cmd_repro_table1(args, extra) -> int:
    cols = [("NLL", "nll", 3, 1.0), ("KL(q_z||p_z|x) x100", "kl_z", 2, 100.0),
            ("KL(q_w||p_w|x) x100", "kl_w", 2, 100.0), ("Δ-Bayes", "delta_bayes", 2, 1.0)]
    return _repro_cmd(args, extra, "parametric", ["discover", "plain_vae"], cols)


def cmd_repro_table2(args, extra) -> int:
    cols = [("I(z;w)", "mi_zw", 3, 1.0), ("NLL", "nll", 3, 1.0),
            ("Δ-Bayes", "delta_bayes", 2, 1.0)]
    return _repro_cmd(args, extra, "swiss_roll", ["discover", "plain_vae"], cols)


def cmd_repro_cmnist(args, extra) -> int:
    cols = [("marginal RMSE", "marginal_rmse", 4, 1.0),
            ("label-conditioned baseline RMSE", "baseline_rmse", 4, 1.0)]
    rates = [float(r) for r in args.noise_rates.split(",")]
    return _repro_cmd(args, extra, "colored_digits", ["discover", "conditional_vae"], cols, rates)


# -- entry point ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="discover", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("--config", help="JSON config file (default: the named preset)")
        sp.add_argument("--preset", choices=preset_names(), default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None)

    sp = sub.add_parser("train", help="train a model; extra --a.b VALUE pairs override the config")
    config_args(sp)
    sp.add_argument("--eval", action="store_true", help="evaluate the enabled metrics afterwards")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a run directory on regenerated held-out data")
    sp.add_argument("run_dir")
    sp.add_argument("--metrics", default=None, help="comma-separated metric names")
    sp.add_argument("--results", default=None, help="results CSV to append to")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gen-data", help="write a dataset blob and manifest")
    config_args(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("export", help="dump plot data for a run")
    sp.add_argument("run_dir")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_export)

    for name, func, default_seeds in (("repro-table1", cmd_repro_table1, 10),
                                      ("repro-table2", cmd_repro_table2, 10),
                                      ("repro-cmnist", cmd_repro_cmnist, 1)):
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None)
        sp.add_argument("--seeds", type=int, default=default_seeds)
        sp.add_argument("--seed-start", type=int, default=0)
        sp.add_argument("--models", default=None)
        sp.add_argument("--out", default=None)
        if name == "repro-cmnist":
            sp.add_argument("--noise-rates", default="0.1,0.3")
        sp.set_defaults(func=func)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, extra)
    except (ConfigError, UnsupportedMetricError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (IntegrityError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
