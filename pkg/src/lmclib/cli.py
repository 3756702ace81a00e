"""Command-line harness around the library.

Subcommands: generate | fit | predict | evaluate | sweep | verify.  Configs
are INI files with [datagen], [train] and [experiment] sections; see the
shipped files under configs/ for complete examples.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import io as lio
from .bench import ExperimentConfig, evaluate_prediction, run_experiment
from .inference import Dataset
from .model import LmcModel, VARIANTS
from .synthdata import DataGenConfig, generate
from .training import TrainConfig, fit
from .verify import run_all


def _load_datagen(path) -> DataGenConfig:
    if path is None:
        return DataGenConfig()
    parser = lio.read_config(path)
    if "datagen" not in parser:
        raise SystemExit(f"{path}: missing [datagen] section")
    return lio.datagen_config_from_section(parser["datagen"])


def _load_train(path) -> TrainConfig:
    if path is None:
        return TrainConfig()
    parser = lio.read_config(path)
    if "train" not in parser:
        return TrainConfig()
    return lio.train_config_from_section(parser["train"])


def _load_experiment(path) -> ExperimentConfig:
    parser = lio.read_config(path)
    if "experiment" not in parser:
        raise SystemExit(f"{path}: missing [experiment] section")
    section = parser["experiment"]
    kwargs = {
        "datagen": (lio.datagen_config_from_section(parser["datagen"])
                    if "datagen" in parser else DataGenConfig()),
        "train": (lio.train_config_from_section(parser["train"])
                  if "train" in parser else TrainConfig()),
    }
    if "variants" in section:
        kwargs["variants"] = tuple(
            v.strip() for v in section["variants"].split(",") if v.strip()
        )
    if "n_rep" in section:
        kwargs["n_rep"] = int(section["n_rep"])
    if "sweep_param" in section:
        kwargs["sweep_param"] = section["sweep_param"].strip()
        kwargs["sweep_values"] = tuple(
            float(v) for v in section["sweep_values"].split(",")
        )
    if "timing" in section:
        kwargs["timing"] = section["timing"].strip()
    if "error_targets" in section:
        kwargs["error_targets"] = section["error_targets"].strip()
    return ExperimentConfig(**kwargs)


def cmd_generate(args) -> int:
    config = _load_datagen(args.config)
    if args.seed_offset:
        config = config.replace(seed=config.seed + args.seed_offset)
    train, test, truth = generate(config)
    lio.write_dataset(args.out, train, test, truth, config)
    print(f"wrote dataset ({config.n_tasks} tasks, {config.n_points} train / "
          f"{config.n_test} test points) to {args.out}")
    return 0


def cmd_fit(args) -> int:
    train, _, _ = lio.read_dataset(args.data)
    config = _load_train(args.config)
    if args.seed_offset:
        config = TrainConfig(**{**config.__dict__,
                                "seed": config.seed + args.seed_offset})
    parser = lio.read_config(args.config) if args.config else None
    n_latent = args.latents
    if n_latent is None and parser is not None and "datagen" in parser:
        n_latent = int(parser["datagen"].get("n_lat", "0")) or None
    if n_latent is None:
        raise SystemExit("pass --latents (or a config with [datagen] n_lat)")
    model = LmcModel.create(args.variant, train, n_latent, seed=config.seed)
    report = fit(model, train, config)
    lio.save_checkpoint(args.out, model, config, report)
    print(f"fit {args.variant}: {report.n_iters} iterations, "
          f"final loss {report.final_loss:.6g}, "
          f"{report.wall_time:.2f}s -> {args.out}")
    return 0


def cmd_predict(args) -> int:
    train, test, _ = lio.read_dataset(args.data)
    model, _, _ = lio.load_checkpoint(args.checkpoint)
    pred = model.predict(train, test.X)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lio.write_matrix(out / "mean.txt", pred.mean.numpy())
    lio.write_matrix(out / "task_var.txt", pred.task_var.numpy())
    import torch

    with torch.no_grad():
        noise_diag = torch.diagonal(model.sigma()).numpy()
    lio.write_matrix(out / "obs_var.txt",
                     pred.task_var.numpy() + noise_diag[:, None])
    lio.write_matrix(out / "latent_mean.txt", pred.latent_mean.numpy())
    lio.write_matrix(out / "latent_var.txt", pred.latent_var.numpy())
    print(f"wrote predictions for {pred.mean.shape[1]} points to {out}")
    return 0


def cmd_evaluate(args) -> int:
    train, test, extra = lio.read_dataset(args.data)
    model, _, report = lio.load_checkpoint(args.checkpoint)
    pred = model.predict(train, test.X)
    record = evaluate_prediction(pred, model, test, extra["signal_test"],
                                 extra["h_true"], args.targets)
    if report is not None:
        record.n_iter = report.n_iters
        record.t_train = report.wall_time
    lines = ["err_l1,q95_l1,pva,h_corr,n_iter,t_train_s",
             f"{record.err_l1:.17g},{record.q95_l1:.17g},"
             f"{record.pva:.17g},{record.h_corr:.17g},"
             f"{record.n_iter},{record.t_train:.3f}"]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_sweep(args) -> int:
    config = _load_experiment(args.config)
    _, _, all_ok = run_experiment(config, args.out, workers=args.workers,
                                  seed_offset=args.seed_offset)
    print(f"results in {args.out}/results.csv "
          f"({'all fits succeeded' if all_ok else 'SOME FITS FAILED'})")
    return 0 if all_ok else 1


def cmd_verify(args) -> int:
    results = run_all(verbose=True)
    return 0 if all(r.passed for r in results) else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="lmc-bench",
        description="multi-output GP benchmark harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required,
                       help="INI config file")
        p.add_argument("--seed-offset", type=int, default=0)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fit", help="fit one variant on a dataset dump")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--variant", required=True, choices=VARIANTS)
    p.add_argument("--latents", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict at the dataset's test inputs")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score a fitted model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--targets", choices=("noisy", "noiseless"),
                   default="noisy")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="run a full experiment config")
    common(p, config_required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="run the exact-equivalence self checks")
    p.set_defaults(func=cmd_verify)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
