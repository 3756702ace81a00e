"""Plain-text file formats: matrix dumps, dataset directories, model
checkpoints, and the INI experiment configs consumed by the CLI.

Matrix files carry one header line with the dimensions followed by one line
per row; values are written with 17 significant digits so that float64
content round-trips losslessly.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .inference import Dataset
from .model import LmcModel
from .synthdata import DataGenConfig
from .training import FitReport, TrainConfig

CHECKPOINT_FORMAT = "lmclib-checkpoint"
CHECKPOINT_VERSION = 1

DATASET_FILES = {
    "x_train": "x_train.txt",
    "y_train": "y_train.txt",
    "x_test": "x_test.txt",
    "y_test": "y_test.txt",
    "y_test_signal": "y_test_signal.txt",
    "h_true": "h_true.txt",
}


def write_matrix(path, M):
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    lines = [f"{M.shape[0]} {M.shape[1]}"]
    for row in M:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_matrix(path) -> np.ndarray:
    lines = Path(path).read_text().strip().splitlines()
    rows, cols = (int(v) for v in lines[0].split())
    data = np.array([[float(v) for v in line.split()]
                     for line in lines[1:rows + 1]])
    if data.shape != (rows, cols):
        raise ValueError(f"{path}: header says {rows}x{cols}, "
                         f"found {data.shape}")
    return data


def write_dataset(out_dir, train: Dataset, test: Dataset, ground_truth: dict,
                  config: DataGenConfig):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix(out / DATASET_FILES["x_train"], train.X.numpy())
    write_matrix(out / DATASET_FILES["y_train"], train.Y.numpy())
    write_matrix(out / DATASET_FILES["x_test"], test.X.numpy())
    write_matrix(out / DATASET_FILES["y_test"], test.Y.numpy())
    write_matrix(out / DATASET_FILES["y_test_signal"],
                 ground_truth["signal_test"])
    write_matrix(out / DATASET_FILES["h_true"], ground_truth["h_true"])
    parser = configparser.ConfigParser()
    parser["datagen"] = {k: str(v) for k, v in
                         dataclasses.asdict(config).items()}
    with open(out / "datagen.ini", "w") as fh:
        parser.write(fh)


def read_dataset(in_dir) -> Tuple[Dataset, Dataset, dict]:
    ind = Path(in_dir)
    train = Dataset(X=read_matrix(ind / DATASET_FILES["x_train"]),
                    Y=read_matrix(ind / DATASET_FILES["y_train"]))
    test = Dataset(X=read_matrix(ind / DATASET_FILES["x_test"]),
                   Y=read_matrix(ind / DATASET_FILES["y_test"]))
    extra = {
        "signal_test": read_matrix(ind / DATASET_FILES["y_test_signal"]),
        "h_true": read_matrix(ind / DATASET_FILES["h_true"]),
    }
    return train, test, extra


def save_checkpoint(path, model: LmcModel, config: TrainConfig,
                    report: Optional[FitReport] = None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": model.state_dict(),
        "train_config": dataclasses.asdict(config),
    }
    if report is not None:
        payload["report"] = dataclasses.asdict(report)
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def load_checkpoint(path):
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a model checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version "
                         f"{payload.get('version')}")
    model = LmcModel.from_state_dict(payload["model"])
    config = TrainConfig(**payload["train_config"])
    report = None
    if "report" in payload:
        report = FitReport(**payload["report"])
    return model, config, report


_DATAGEN_TYPES = {
    "n_tasks": int, "n_lat": int, "n_lat_noise": int, "n_points": int,
    "mu_noise": float, "mu_str": float, "l_min": float, "l_max": float,
    "n_test": int, "seed": int, "h_mode": str,
}
_TRAIN_TYPES = {
    "lr_max": float, "lr_min": float, "max_iters": int,
    "plateau_delta": float, "patience": int, "weight_decay": float,
    "seed": int,
}


def datagen_config_from_section(section) -> DataGenConfig:
    kwargs = {name: typ(section[name])
              for name, typ in _DATAGEN_TYPES.items() if name in section}
    return DataGenConfig(**kwargs)


def train_config_from_section(section) -> TrainConfig:
    kwargs = {name: typ(section[name])
              for name, typ in _TRAIN_TYPES.items() if name in section}
    return TrainConfig(**kwargs)


def read_config(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(f"config file {path} not found or empty")
    return parser
