"""Seeded synthetic data: latent Matern-5/2 draws mixed into p tasks with a
two-component (structured + independent) noise model.

The generator is fully determined by its config, including the seed; every
random quantity is drawn from one ``numpy`` generator in a fixed order, so
identical configs give bit-identical datasets.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Dict

import numpy as np
import torch

from .inference import Dataset
from .kernels import Matern52Kernel, kernel_matrix

LATENT_SAMPLE_JITTER = 1e-8
H_MODES = ("gaussian", "physical")


@dataclass
class DataGenConfig:
    n_tasks: int = 10
    n_lat: int = 2
    n_lat_noise: int = 3
    n_points: int = 50
    mu_noise: float = 0.05
    mu_str: float = 0.5
    l_min: float = 0.1
    l_max: float = 0.5
    n_test: int = 500
    seed: int = 0
    h_mode: str = "gaussian"

    def __post_init__(self):
        if self.n_tasks < 1 or self.n_lat < 1 or self.n_points < 1:
            raise ValueError("counts must be positive")
        if self.n_lat_noise < 0 or self.n_test < 0:
            raise ValueError("counts must be nonnegative")
        if not (0.0 <= self.mu_noise <= 1.0 and 0.0 <= self.mu_str <= 1.0):
            raise ValueError("mixing proportions must lie in [0, 1]")
        if not (0 < self.l_min <= self.l_max):
            raise ValueError("need 0 < l_min <= l_max")
        if self.h_mode not in H_MODES:
            raise ValueError(f"h_mode must be one of {H_MODES}")

    def replace(self, **kwargs) -> "DataGenConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(kwargs)
        return DataGenConfig(**values)


def mixing_from_geometry(sensor_x: np.ndarray, sources: np.ndarray,
                         amplitudes: np.ndarray) -> np.ndarray:
    """Mixing matrix of inverse-square-decay signals: entry (i, j) is the
    amplitude of source j observed at sensor i on the y = 0 axis."""
    sensor_x = np.asarray(sensor_x, dtype=np.float64)
    sources = np.asarray(sources, dtype=np.float64)
    amplitudes = np.asarray(amplitudes, dtype=np.float64)
    dx = sensor_x[:, None] - sources[None, :, 0]
    dy = -sources[None, :, 1]
    d2 = dx * dx + dy * dy
    if np.any(d2 == 0.0):
        raise ValueError("a source coincides with a sensor")
    return amplitudes[None, :] / d2


def physical_mixing(p: int, q: int, seed) -> np.ndarray:
    """Strictly positive mixing matrix from q randomly placed wave sources
    reaching p sensors equally spaced on [-1, 1] along the y = 0 axis; the
    source amplitudes are 1, 2, ..., q."""
    if p < 2:
        raise ValueError("need at least two sensors")
    if q < 1:
        raise ValueError("need at least one source")
    rng = seed if isinstance(seed, np.random.Generator) \
        else np.random.default_rng(seed)
    sensor_x = np.linspace(-1.0, 1.0, p)
    amplitudes = np.arange(1, q + 1, dtype=np.float64)
    for _ in range(100):
        sources = rng.standard_normal((q, 2))
        dx = sensor_x[:, None] - sources[None, :, 0]
        d2 = dx * dx + sources[None, :, 1] ** 2
        if np.min(d2) > 1e-12:
            return mixing_from_geometry(sensor_x, sources, amplitudes)
    raise RuntimeError("could not place sources away from the sensors")


def _sample_latents(X_all: np.ndarray, lengthscales: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    """One unit-variance Matern-5/2 draw per lengthscale over all inputs."""
    n_all = X_all.shape[1]
    out = np.empty((lengthscales.size, n_all))
    for i, ls in enumerate(lengthscales):
        K = kernel_matrix(X_all, Matern52Kernel(lengthscale=float(ls)),
                          jitter=LATENT_SAMPLE_JITTER).numpy()
        chol = np.linalg.cholesky(K)
        out[i] = chol @ rng.standard_normal(n_all)
    return out


def generate(config: DataGenConfig):
    """Draw one dataset; returns (train, test, ground_truth).

    ground_truth holds the mixing matrix, the latent draws, the scaled
    noiseless signal at the test inputs, and the raw noise components.
    """
    rng = np.random.default_rng(config.seed)
    n, m = config.n_points, config.n_test
    p, q = config.n_tasks, config.n_lat

    x_train = np.linspace(-1.0, 1.0, n)[None, :]
    x_test = rng.uniform(-1.0, 1.0, size=m)[None, :]
    x_all = np.concatenate([x_train, x_test], axis=1)

    lengthscales = np.linspace(config.l_min, config.l_max, q)
    latents = _sample_latents(x_all, lengthscales, rng)

    if config.h_mode == "physical":
        h_true = physical_mixing(p, q, rng)
    else:
        h_true = rng.standard_normal((p, q))

    h_noise = rng.standard_normal((p, config.n_lat_noise))
    whites = rng.standard_normal((config.n_lat_noise, n + m))
    noise_ind = rng.standard_normal((p, n + m))
    noise_str = h_noise @ whites
    data_noise = config.mu_str * noise_str + (1.0 - config.mu_str) * noise_ind

    data_signal = h_true @ latents
    data_full = (config.mu_noise * data_noise
                 + (1.0 - config.mu_noise) * data_signal)

    train = Dataset(X=x_train, Y=data_full[:, :n])
    test = Dataset(X=x_test, Y=data_full[:, n:])
    ground_truth: Dict[str, np.ndarray] = {
        "h_true": h_true,
        "lengthscales": lengthscales,
        "latents_train": latents[:, :n],
        "latents_test": latents[:, n:],
        "signal_test": (1.0 - config.mu_noise) * data_signal[:, n:],
        "noise_str": noise_str,
        "noise_ind": noise_ind,
    }
    return train, test, ground_truth
