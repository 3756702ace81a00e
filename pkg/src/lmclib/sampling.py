"""Random well-conditioned instances for identity checks and tests."""

from __future__ import annotations

import numpy as np
import torch

from .inference import Dataset
from .kernels import Matern52Kernel
from .noise import MixingQR, NoiseParams


def sample_mixing(p: int, q: int, rng: np.random.Generator,
                  diag_r: bool = False) -> MixingQR:
    """Random full-rank mixing factors; ``diag_r`` forces a positive diagonal
    triangular factor (the OILMM-style restriction)."""
    H = rng.standard_normal((p, q))
    mix = MixingQR.from_mixing(H)
    if not diag_r:
        return mix
    r = torch.diag(torch.abs(torch.diagonal(mix.r)) + 0.1)
    return MixingQR(q=mix.q, r=r, q_perp=mix.q_perp)


def sample_noise_params(p: int, q: int, rng: np.random.Generator,
                        bdn: bool = False, diag_b: bool = False,
                        oilmm: bool = False) -> NoiseParams:
    mixing = sample_mixing(p, q, rng, diag_r=oilmm)
    k = p - q
    proj_noise = np.exp(rng.uniform(np.log(0.01), np.log(1.0), size=q))
    if bdn or oilmm:
        coupling = np.zeros((q, k))
    else:
        coupling = 0.5 * rng.standard_normal((q, k))
    if oilmm:
        comp = np.exp(rng.uniform(-1.0, 0.5)) * np.eye(k)
    else:
        comp = np.diag(np.exp(rng.uniform(-1.0, 0.5, size=k)))
        if not diag_b and k > 1:
            comp += np.tril(0.3 * rng.standard_normal((k, k)), -1)
    return NoiseParams(mixing=mixing, proj_noise=proj_noise,
                       coupling=coupling, comp_chol=comp,
                       bdn=bdn or oilmm, diag_b=diag_b or oilmm, oilmm=oilmm)


def sample_kernels(q: int, rng: np.random.Generator):
    return [
        Matern52Kernel(
            lengthscale=float(np.exp(rng.uniform(np.log(0.2), np.log(1.5)))),
            output_scale=float(np.exp(rng.uniform(np.log(0.5), np.log(2.0)))),
        )
        for _ in range(q)
    ]


def sample_dataset(p: int, n: int, rng: np.random.Generator,
                   scale: float = 1.0) -> Dataset:
    X = np.sort(rng.uniform(-1.0, 1.0, size=n))[None, :]
    Y = scale * rng.standard_normal((p, n))
    return Dataset(X=X, Y=Y)


def sample_spd(p: int, rng: np.random.Generator,
               spread: float = 1.0) -> np.ndarray:
    """Random SPD matrix with eigenvalues bounded away from zero."""
    A = rng.standard_normal((p, p))
    qm, _ = np.linalg.qr(A)
    eigs = np.exp(rng.uniform(-spread, spread, size=p))
    return (qm * eigs) @ qm.T
