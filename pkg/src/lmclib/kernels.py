"""Matern-5/2 kernel evaluation and PSD kernel-matrix assembly.

All functions work on ``torch.float64`` tensors so that kernel matrices stay
differentiable with respect to the hyperparameters; plain numpy arrays and
Python floats are accepted and converted on entry.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .exceptions import NumericalDegeneracyError

SQRT5 = 5.0 ** 0.5

# Jitter escalation for nearly-singular kernel matrices: start at
# JITTER_START * output_scale and multiply by 10 until JITTER_MAX * output_scale.
JITTER_START = 1e-8
JITTER_MAX = 1e-4


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(torch.float64)
    return torch.as_tensor(x, dtype=torch.float64)


@dataclass
class Matern52Kernel:
    """Stationary Matern kernel with smoothness 5/2.

    k(r) = output_scale * (1 + sqrt(5) r / l + 5 r^2 / (3 l^2)) * exp(-sqrt(5) r / l)

    ``lengthscale`` and ``output_scale`` may be floats or 0-dim torch tensors
    (the latter keeps the kernel differentiable for training).
    """

    lengthscale: object = 1.0
    output_scale: object = 1.0

    def __post_init__(self):
        ls, s = self.lengthscale, self.output_scale
        if isinstance(ls, torch.Tensor):
            ls = ls.detach()
        if isinstance(s, torch.Tensor):
            s = s.detach()
        if float(ls) <= 0 or float(s) <= 0:
            raise ValueError("lengthscale and output_scale must be positive")

    def at_distance(self, r: torch.Tensor) -> torch.Tensor:
        """Evaluate the kernel at pairwise distances r >= 0."""
        s = _as_tensor(self.output_scale)
        z = SQRT5 * r / _as_tensor(self.lengthscale)
        return s * (1.0 + z + z * z / 3.0) * torch.exp(-z)


def _pairwise_distances(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """|x_i - y_j| for inputs of shape (d, n) and (d, m), computed without the
    squared-norm expansion (stable for the d=1 case that dominates here)."""
    diff = x.unsqueeze(2) - y.unsqueeze(1)  # (d, n, m)
    return torch.sqrt(torch.clamp((diff * diff).sum(dim=0), min=0.0))


def matern52(x, y, kernel: Matern52Kernel):
    """Kernel value between two points (1-d arrays of equal dimension)."""
    xv = _as_tensor(x).reshape(-1)
    yv = _as_tensor(y).reshape(-1)
    if xv.numel() != yv.numel():
        raise ValueError("x and y must have the same dimension")
    if not (torch.isfinite(xv).all() and torch.isfinite(yv).all()):
        raise ValueError("non-finite kernel inputs")
    r = torch.linalg.vector_norm(xv - yv)
    return kernel.at_distance(r)


def _as_input_matrix(X) -> torch.Tensor:
    X = _as_tensor(X)
    if X.ndim == 1:
        X = X.unsqueeze(0)
    if X.ndim != 2:
        raise ValueError("inputs must be a (d, n) matrix")
    if not torch.isfinite(X).all():
        raise ValueError("non-finite kernel inputs")
    return X


def kernel_matrix(X, kernel: Matern52Kernel, jitter: float = 0.0) -> torch.Tensor:
    """Symmetric kernel matrix of the columns of X (shape d x n), plus jitter * I."""
    X = _as_input_matrix(X)
    if X.shape[1] < 1:
        raise ValueError("need at least one input point")
    if jitter < 0:
        raise ValueError("jitter must be nonnegative")
    K = kernel.at_distance(_pairwise_distances(X, X))
    K = 0.5 * (K + K.T)
    if jitter:
        K = K + jitter * torch.eye(X.shape[1], dtype=torch.float64)
    return K


def cross_kernel(X, Xstar, kernel: Matern52Kernel) -> torch.Tensor:
    """Cross-covariance matrix, entry (j, t) = k(x_j, x*_t). No jitter."""
    X = _as_input_matrix(X)
    Xs = _as_tensor(Xstar)
    if Xs.ndim == 1:
        Xs = Xs.unsqueeze(0)
    if Xs.shape[0] != X.shape[0]:
        raise ValueError(
            f"input dimension mismatch: {X.shape[0]} vs {Xs.shape[0]}"
        )
    if Xs.shape[1] == 0:
        return torch.zeros((X.shape[1], 0), dtype=torch.float64)
    if not torch.isfinite(Xs).all():
        raise ValueError("non-finite kernel inputs")
    return kernel.at_distance(_pairwise_distances(X, Xs))


def safe_cholesky(K: torch.Tensor, scale: float = 1.0, what: str = "matrix") -> torch.Tensor:
    """Lower Cholesky factor of K, escalating jitter from JITTER_START*scale
    by factors of 10 up to JITTER_MAX*scale before giving up.

    The first attempt adds no jitter at all, so well-conditioned matrices are
    factored exactly as given.
    """
    jitter = 0.0
    eye = torch.eye(K.shape[0], dtype=K.dtype)
    while True:
        try:
            return torch.linalg.cholesky(K + jitter * eye)
        except torch.linalg.LinAlgError:
            jitter = JITTER_START * scale if jitter == 0.0 else jitter * 10.0
            if jitter > JITTER_MAX * scale * (1 + 1e-12):
                raise NumericalDegeneracyError(
                    f"Cholesky factorization of {what} failed even with "
                    f"jitter {jitter / 10.0:g} (scale {scale:g})"
                ) from None
