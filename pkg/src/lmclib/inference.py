"""Exact posteriors and marginal likelihoods for the multi-output model.

Two complementary code paths are provided:

* a dense path that flattens the p tasks into one big Gaussian (task-major
  ordering, one n-block per task).  It is cubic in n * p and serves as the
  correctness oracle for everything else;
* a decoupled path that only ever factorizes one n x n matrix per latent
  process.  It requires noise supplied as :class:`~lmclib.noise.NoiseParams`,
  whose construction guarantees the diagonal-projection condition that makes
  the decoupling exact.

Both marginal-likelihood variants return log p(Y) (natural log, including the
full Gaussian normalization constant).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .exceptions import NumericalDegeneracyError
from .kernels import Matern52Kernel, cross_kernel, kernel_matrix, safe_cholesky
from .noise import NoiseParams, compute_t

LOG_2PI = math.log(2.0 * math.pi)

# The dense oracle path materializes (n p) x (n p) matrices; keep it at desk
# scale on purpose.
DENSE_SIZE_LIMIT = 4000

LatentKernelSet = Sequence[Matern52Kernel]


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(torch.float64)
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


@dataclass(frozen=True)
class Dataset:
    """Paired inputs X (d x n) and outputs Y (p x n); column j of Y holds the
    p task values observed at input column j of X."""

    X: torch.Tensor
    Y: torch.Tensor

    def __post_init__(self):
        X = _t(self.X)
        if X.ndim == 1:
            X = X.unsqueeze(0)
        Y = _t(self.Y)
        if Y.ndim == 1:
            Y = Y.unsqueeze(0)
        if X.shape[1] != Y.shape[1]:
            raise ValueError("X and Y must have the same number of columns")
        if not (torch.isfinite(X).all() and torch.isfinite(Y).all()):
            raise ValueError("dataset contains non-finite values")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def n_points(self) -> int:
        return self.X.shape[1]

    @property
    def n_tasks(self) -> int:
        return self.Y.shape[0]

    def pairwise_distances(self) -> torch.Tensor:
        """Distance matrix of the training inputs, computed once and cached
        (it does not depend on any model parameter)."""
        cached = self.__dict__.get("_distances")
        if cached is None:
            diff = self.X.unsqueeze(2) - self.X.unsqueeze(1)
            cached = torch.sqrt(torch.clamp((diff * diff).sum(dim=0), min=0.0))
            object.__setattr__(self, "_distances", cached)
        return cached


@dataclass(frozen=True)
class PredictionResult:
    """Posterior of the noiseless task values at m test points.

    ``task_var`` holds the marginal per-task variances (p x m).  The full
    p x p per-point covariances (m, p, p) are only materialized when the
    prediction was requested with ``full_cov=True``.
    """

    mean: torch.Tensor
    task_var: torch.Tensor
    latent_mean: torch.Tensor
    latent_var: torch.Tensor
    task_cov: Optional[torch.Tensor] = None


def _check_dense_size(n: int, p: int):
    if n * p > DENSE_SIZE_LIMIT:
        raise ValueError(
            f"dense path limited to n*p <= {DENSE_SIZE_LIMIT} (got {n * p}); "
            "use the decoupled path for larger problems"
        )


def _latent_kernel_mats(data: Dataset, kernels: LatentKernelSet) -> list:
    dist = data.pairwise_distances()
    return [k.at_distance(dist) for k in kernels]


def _dense_cov(data: Dataset, H: torch.Tensor, Sigma: torch.Tensor,
               K_list: list) -> torch.Tensor:
    """(n p) x (n p) covariance: sum_i (h_i h_i^T) (x) K_i + Sigma (x) I."""
    n = data.n_points
    p = H.shape[0]
    big = torch.zeros((n * p, n * p), dtype=torch.float64)
    for i, K in enumerate(K_list):
        big += torch.kron(torch.outer(H[:, i], H[:, i]), K)
    big += torch.kron(Sigma, torch.eye(n, dtype=torch.float64))
    return 0.5 * (big + big.T)


def _gaussian_loglik(chol: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """log N(y | 0, C C^T) for a vector y, given the Cholesky factor."""
    alpha = torch.cholesky_solve(y.unsqueeze(1), chol).squeeze(1)
    logdet = 2.0 * torch.log(torch.diagonal(chol)).sum()
    return -0.5 * (y @ alpha + logdet + y.numel() * LOG_2PI)


def naive_mll(data: Dataset, H, Sigma, kernels: LatentKernelSet) -> torch.Tensor:
    """log p(Y) through the dense (n p) x (n p) covariance."""
    H = _t(H)
    Sigma = _t(Sigma)
    _check_dense_size(data.n_points, H.shape[0])
    K_list = _latent_kernel_mats(data, kernels)
    big = _dense_cov(data, H, Sigma, K_list)
    chol = safe_cholesky(big, scale=float(torch.max(torch.diagonal(big)).detach()),
                         what="dense task covariance")
    y_v = data.Y.reshape(-1)
    return _gaussian_loglik(chol, y_v)


def _projected_noise_matrix(H: torch.Tensor, Sigma: torch.Tensor) -> torch.Tensor:
    """(H^T Sigma^-1 H)^-1, the noise seen by the latent processes."""
    chol = safe_cholesky(Sigma, scale=float(torch.max(torch.diagonal(Sigma)).detach()),
                         what="noise covariance")
    w = torch.cholesky_solve(H, chol)
    gram = H.T @ w
    return torch.linalg.inv(0.5 * (gram + gram.T))


def naive_posterior(data: Dataset, H, Sigma, kernels: LatentKernelSet,
                    Xstar, full_cov: bool = False) -> PredictionResult:
    """Dense-path posterior at test inputs Xstar (d x m).

    Task quantities go through the full (n p) x (n p) solve; latent
    quantities go through the (n q) x (n q) latent-space form.  The identity
    mean == H @ latent_mean holds for any SPD noise and is exercised by the
    test suite.
    """
    H = _t(H)
    Sigma = _t(Sigma)
    n, p = data.n_points, H.shape[0]
    q = H.shape[1]
    _check_dense_size(n, p)
    Xs = _t(Xstar)
    if Xs.ndim == 1:
        Xs = Xs.unsqueeze(0)
    m = Xs.shape[1]

    K_list = _latent_kernel_mats(data, kernels)
    big = _dense_cov(data, H, Sigma, K_list)
    chol = safe_cholesky(big, scale=float(torch.max(torch.diagonal(big)).detach()),
                         what="dense task covariance")
    alpha = torch.cholesky_solve(data.Y.reshape(-1, 1), chol).squeeze(1)

    cross_list = [cross_kernel(data.X, Xs, k) for k in kernels]
    scales = torch.stack([_t(k.output_scale) for k in kernels])

    # Cross covariance between all n p training values and all m p test
    # values, columns ordered task-major exactly like the rows.
    cross_big = torch.zeros((n * p, p * m), dtype=torch.float64)
    for i in range(q):
        cross_big += torch.kron(torch.outer(H[:, i], H[:, i]), cross_list[i])
    mean = (cross_big.T @ alpha).reshape(p, m)

    solved = torch.cholesky_solve(cross_big, chol)  # (n p, p m)
    prior_task = H @ torch.diag(scales) @ H.T
    task_var = torch.empty((p, m), dtype=torch.float64)
    task_cov = torch.empty((m, p, p), dtype=torch.float64) if full_cov else None
    for t in range(m):
        cols = slice(t, p * m, m)
        cov_t = prior_task - cross_big[:, cols].T @ solved[:, cols]
        cov_t = 0.5 * (cov_t + cov_t.T)
        task_var[:, t] = torch.diagonal(cov_t)
        if full_cov:
            task_cov[t] = cov_t

    latent_mean, latent_var = _dense_latent_posterior(
        data, H, Sigma, K_list, cross_list, scales
    )
    return PredictionResult(
        mean=mean,
        task_var=torch.clamp(task_var, min=0.0),
        latent_mean=latent_mean,
        latent_var=torch.clamp(latent_var, min=0.0),
        task_cov=task_cov,
    )


def _dense_latent_posterior(data, H, Sigma, K_list, cross_list, scales):
    """Latent posterior through the (n q) x (n q) latent-space system, valid
    for arbitrary SPD noise (no diagonality assumption)."""
    n = data.n_points
    q = H.shape[1]
    m = cross_list[0].shape[1] if cross_list else 0
    sigma_p = _projected_noise_matrix(H, Sigma)
    lat = torch.zeros((n * q, n * q), dtype=torch.float64)
    for i, K in enumerate(K_list):
        lat[i * n:(i + 1) * n, i * n:(i + 1) * n] = K
    lat += torch.kron(sigma_p.contiguous(), torch.eye(n, dtype=torch.float64))
    lat = 0.5 * (lat + lat.T)
    chol = safe_cholesky(lat, scale=float(torch.max(torch.diagonal(lat)).detach()),
                         what="dense latent covariance")
    proj = compute_t_dense(H, Sigma)  # q x p
    ty = proj @ data.Y  # q x n
    w = torch.cholesky_solve(ty.reshape(-1, 1), chol).squeeze(1)

    latent_mean = torch.empty((q, m), dtype=torch.float64)
    for i in range(q):
        latent_mean[i] = cross_list[i].T @ w[i * n:(i + 1) * n]

    # Marginal variances need one block-structured right-hand side per test
    # point; batch them into a single solve.
    rhs = torch.zeros((n * q, q * m), dtype=torch.float64)
    for i in range(q):
        rhs[i * n:(i + 1) * n, i * m:(i + 1) * m] = cross_list[i]
    sol = torch.cholesky_solve(rhs, chol)
    latent_var = torch.empty((q, m), dtype=torch.float64)
    for i in range(q):
        quad = (rhs[:, i * m:(i + 1) * m] * sol[:, i * m:(i + 1) * m]).sum(dim=0)
        latent_var[i] = scales[i] - quad
    return latent_mean, latent_var


def compute_t_dense(H, Sigma) -> torch.Tensor:
    """Projection matrix (H^T Sigma^-1 H)^-1 H^T Sigma^-1 from dense solves;
    independent of the parametrized form in :mod:`lmclib.noise`."""
    H = _t(H)
    Sigma = _t(Sigma)
    chol = safe_cholesky(Sigma, scale=float(torch.max(torch.diagonal(Sigma)).detach()),
                         what="noise covariance")
    w = torch.cholesky_solve(H, chol)  # Sigma^-1 H
    gram = H.T @ w
    return torch.linalg.solve(0.5 * (gram + gram.T), w.T)


def _latent_chols(data: Dataset, params: NoiseParams,
                  kernels: LatentKernelSet) -> tuple:
    """Per-latent Cholesky factors of K_i + sigma_i^2 I."""
    n = data.n_points
    chols = []
    K_list = []
    dist = data.pairwise_distances()
    for i, k in enumerate(kernels):
        K = k.at_distance(dist)
        K_list.append(K)
        noisy = K + params.proj_noise[i] * torch.eye(n, dtype=torch.float64)
        try:
            chols.append(torch.linalg.cholesky(noisy))
        except torch.linalg.LinAlgError:
            raise NumericalDegeneracyError(
                f"latent block {i}: Cholesky of K + sigma^2 I failed "
                f"(lengthscale {float(k.lengthscale):g}, "
                f"noise {float(params.proj_noise[i]):g})"
            ) from None
    return K_list, chols


def latent_train_posterior(data: Dataset, params: NoiseParams,
                           kernels: LatentKernelSet):
    """Posterior of the latent processes at the training inputs.

    Returns (mean, covs): mean is q x n, covs is a list of q per-latent n x n
    covariance blocks (the full covariance is block-diagonal because the
    parametrized noise projects diagonally).
    """
    if len(kernels) != params.n_latent:
        raise ValueError("need one kernel per latent process")
    ty = compute_t(params) @ data.Y
    K_list, chols = _latent_chols(data, params, kernels)
    mean = torch.empty((params.n_latent, data.n_points), dtype=torch.float64)
    covs = []
    for i, (K, chol) in enumerate(zip(K_list, chols)):
        smoothed = torch.cholesky_solve(ty[i].unsqueeze(1), chol).squeeze(1)
        mean[i] = K @ smoothed
        cov = K - K @ torch.cholesky_solve(K, chol)
        covs.append(0.5 * (cov + cov.T))
    return mean, covs


def decoupled_posterior(data: Dataset, params: NoiseParams,
                        kernels: LatentKernelSet, Xstar,
                        full_cov: bool = False) -> PredictionResult:
    """Posterior at test inputs via q independent single-output regressions
    on the projected data rows; cost O(n^3 q + n^2 q m)."""
    if len(kernels) != params.n_latent:
        raise ValueError("need one kernel per latent process")
    Xs = _t(Xstar)
    if Xs.ndim == 1:
        Xs = Xs.unsqueeze(0)
    m = Xs.shape[1]
    q = params.n_latent
    H = params.mixing.h

    ty = compute_t(params) @ data.Y
    _, chols = _latent_chols(data, params, kernels)
    latent_mean = torch.empty((q, m), dtype=torch.float64)
    latent_var = torch.empty((q, m), dtype=torch.float64)
    for i, k in enumerate(kernels):
        ks = cross_kernel(data.X, Xs, k)
        alpha = torch.cholesky_solve(ty[i].unsqueeze(1), chols[i]).squeeze(1)
        latent_mean[i] = ks.T @ alpha
        sol = torch.cholesky_solve(ks, chols[i])
        latent_var[i] = _t(k.output_scale) - (ks * sol).sum(dim=0)
    latent_var = torch.clamp(latent_var, min=0.0)

    mean = H @ latent_mean
    task_var = (H * H) @ latent_var
    task_cov = None
    if full_cov:
        task_cov = torch.einsum("ai,it,bi->tab", H, latent_var, H)
    return PredictionResult(
        mean=mean,
        task_var=task_var,
        latent_mean=latent_mean,
        latent_var=latent_var,
        task_cov=task_cov,
    )


def projected_mll(data: Dataset, params: NoiseParams,
                  kernels: LatentKernelSet) -> torch.Tensor:
    """log p(Y) in decoupled form: q single-output marginal likelihoods on
    the projected data plus closed-form terms for the discarded component."""
    if len(kernels) != params.n_latent:
        raise ValueError("need one kernel per latent process")
    n = data.n_points
    p, q = params.n_tasks, params.n_latent

    ty = compute_t(params) @ data.Y
    _, chols = _latent_chols(data, params, kernels)
    latent_term = sum(_gaussian_loglik(chol, ty[i])
                      for i, chol in enumerate(chols))

    corrective = (p - q) * n * LOG_2PI
    corrective += 2.0 * n * torch.log(
        torch.abs(torch.diagonal(params.mixing.r))
    ).sum()
    if p > q:
        # log|B~| = -log|B~^-1| = -2 sum log diag(L)
        corrective -= 2.0 * n * torch.log(torch.diagonal(params.comp_chol)).sum()
        resid = params.comp_chol.T @ (params.mixing.q_perp.T @ data.Y)
        corrective += (resid * resid).sum()
    return latent_term - 0.5 * corrective


def raw_mll(data: Dataset, params: NoiseParams,
            kernels: LatentKernelSet) -> torch.Tensor:
    """log p(Y) through the alternate latent-revealing derivation (quadratic
    data term via the dense precision rather than the projection); kept as a
    cross-check of the decoupled form."""
    from .noise import build_sigma_inverse

    n = data.n_points
    p, q = params.n_tasks, params.n_latent
    prec = build_sigma_inverse(params)
    y_prec_y = (data.Y * (prec @ data.Y)).sum()
    g = data.Y.T @ (prec @ params.mixing.h)  # n x q

    quad = torch.zeros((), dtype=torch.float64)
    logdet = torch.zeros((), dtype=torch.float64)
    dist = data.pairwise_distances()
    for i, k in enumerate(kernels):
        K = k.at_distance(dist)
        noisy = K + params.proj_noise[i] * torch.eye(n, dtype=torch.float64)
        try:
            chol = torch.linalg.cholesky(noisy)
        except torch.linalg.LinAlgError:
            raise NumericalDegeneracyError(
                f"latent block {i}: Cholesky of K + sigma^2 I failed"
            ) from None
        logdet += 2.0 * torch.log(torch.diagonal(chol)).sum()
        # (K^-1 + sigma^-2 I)^-1 = K - K (K + sigma^2 I)^-1 K, stable form.
        inner = K - K @ torch.cholesky_solve(K, chol)
        quad += g[:, i] @ (inner @ g[:, i])

    minus_two_logp = y_prec_y - quad + logdet + n * p * LOG_2PI
    minus_two_logp += 2.0 * n * torch.log(
        torch.abs(torch.diagonal(params.mixing.r))
    ).sum()
    if p > q:
        minus_two_logp -= 2.0 * n * torch.log(
            torch.diagonal(params.comp_chol)
        ).sum()
    return -0.5 * minus_two_logp


def likelihood_decomposition(data: Dataset, params: NoiseParams,
                             kernels: LatentKernelSet):
    """Split log p(Y) into the projection-loss correction and the projected
    data likelihood; the two terms sum to :func:`projected_mll`."""
    from .noise import build_sigma

    n = data.n_points
    sigma = build_sigma(params)
    chol_sigma = safe_cholesky(
        sigma, scale=float(torch.max(torch.diagonal(sigma)).detach()),
        what="noise covariance"
    )
    ty = compute_t(params) @ data.Y

    log_full = sum(_gaussian_loglik(chol_sigma, data.Y[:, j])
                   for j in range(n))
    sp_chol = torch.diag(torch.sqrt(params.proj_noise))
    log_proj = sum(_gaussian_loglik(sp_chol, ty[:, j]) for j in range(n))
    log_corrective = log_full - log_proj

    _, chols = _latent_chols(data, params, kernels)
    log_latent = sum(_gaussian_loglik(chol, ty[i])
                     for i, chol in enumerate(chols))
    return log_corrective, log_latent
