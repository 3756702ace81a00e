"""Self-check suite: runs the exact-equivalence identities that justify the
decoupled computations and prints one pass/fail line per identity.

Each check returns (name, max_deviation, tolerance); a fresh install is
expected to pass all of them.
"""

from __future__ import annotations

from typing import Callable, List, NamedTuple

import numpy as np
import torch

from .inference import (
    Dataset,
    decoupled_posterior,
    latent_train_posterior,
    likelihood_decomposition,
    naive_mll,
    naive_posterior,
    projected_mll,
    raw_mll,
)
from .model import LmcModel, PROJECTED_VARIANTS, VARIANTS
from .noise import (
    build_sigma,
    build_sigma_inverse,
    check_dpn,
    compute_t,
    decompose_symmetric,
    orthonormal_from_skew,
    project_noise,
)
from .sampling import (
    sample_dataset,
    sample_kernels,
    sample_mixing,
    sample_noise_params,
    sample_spd,
)
from .synthdata import DataGenConfig, generate
from .training import TrainConfig, loss_gradient_vector


class CheckResult(NamedTuple):
    name: str
    max_deviation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tolerance


def _rel(a: torch.Tensor, b: torch.Tensor) -> float:
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    denom = max(1e-300, float(torch.max(torch.abs(b))))
    return float(torch.max(torch.abs(a - b))) / denom


def check_posterior_decoupling(seed: int = 0, reps: int = 5) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(reps):
        p, q, n, m = 4, 2, 8, 5
        params = sample_noise_params(p, q, rng)
        kernels = sample_kernels(q, rng)
        data = sample_dataset(p, n, rng)
        xs = rng.uniform(-1, 1, size=m)[None, :]
        fast = decoupled_posterior(data, params, kernels, xs)
        dense = naive_posterior(data, params.mixing.h, build_sigma(params),
                                kernels, xs)
        worst = max(worst, _rel(fast.mean, dense.mean),
                    _rel(fast.task_var, dense.task_var))
    return CheckResult("posterior decoupling vs dense oracle", worst, 1e-8)


def check_mll_equivalence(seed: int = 1, reps: int = 5) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(reps):
        p, q, n = 5, 2, 7
        params = sample_noise_params(p, q, rng)
        kernels = sample_kernels(q, rng)
        data = sample_dataset(p, n, rng)
        proj = projected_mll(data, params, kernels)
        dense = naive_mll(data, params.mixing.h, build_sigma(params), kernels)
        raw = raw_mll(data, params, kernels)
        corr, lat = likelihood_decomposition(data, params, kernels)
        worst = max(worst, _rel(proj, dense), _rel(raw, proj),
                    _rel(corr + lat, proj))
    return CheckResult("marginal likelihood equivalences", worst, 1e-8)


def check_projection_identities(seed: int = 2, reps: int = 5) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(reps):
        p, q = 6, 3
        params = sample_noise_params(p, q, rng)
        t = compute_t(params)
        h = params.mixing.h
        sigma = build_sigma(params)
        worst = max(
            worst,
            float(torch.max(torch.abs(t @ h - torch.eye(q, dtype=torch.float64)))),
            float(torch.max(torch.abs(
                t @ sigma @ t.T - torch.diag(params.proj_noise)))),
        )
        ok, _ = check_dpn(h, sigma)
        if not ok:
            worst = max(worst, 1.0)
        prod = build_sigma_inverse(params) @ sigma
        worst = max(worst, float(torch.max(torch.abs(
            prod - torch.eye(p, dtype=torch.float64)))))
    return CheckResult("projection and factorization identities", worst, 1e-8)


def check_latent_block_structure(seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    p, q, n = 4, 2, 6
    params = sample_noise_params(p, q, rng)
    kernels = sample_kernels(q, rng)
    data = sample_dataset(p, n, rng)
    mean, covs = latent_train_posterior(data, params, kernels)
    dense_mean, dense_cov = _dense_latent_train(data, params.mixing.h,
                                                build_sigma(params), kernels)
    worst = _rel(mean.reshape(-1), dense_mean)
    off = dense_cov.clone()
    for i in range(q):
        off[i * n:(i + 1) * n, i * n:(i + 1) * n] = 0.0
        worst = max(worst, _rel(covs[i], dense_cov[i * n:(i + 1) * n,
                                                   i * n:(i + 1) * n]))
    worst = max(worst, float(torch.max(torch.abs(off))))
    return CheckResult("latent posterior block structure", worst, 1e-8)


def _dense_latent_train(data: Dataset, H, Sigma, kernels):
    """Brute-force latent posterior at training points via explicit
    Kronecker assembly (independent of the library code paths)."""
    from .kernels import kernel_matrix

    H = torch.as_tensor(np.asarray(H), dtype=torch.float64)
    Sigma = torch.as_tensor(np.asarray(Sigma), dtype=torch.float64)
    n = data.n_points
    q = H.shape[1]
    prec_blocks = []
    for k in kernels:
        K = kernel_matrix(data.X, k).numpy()
        prec_blocks.append(np.linalg.inv(K))
    a = np.zeros((n * q, n * q))
    for i, blk in enumerate(prec_blocks):
        a[i * n:(i + 1) * n, i * n:(i + 1) * n] = blk
    gram = H.numpy().T @ np.linalg.solve(Sigma.numpy(), H.numpy())
    a += np.kron(gram, np.eye(n))
    cov = np.linalg.inv(a)
    rhs = (data.Y.numpy().T @ np.linalg.solve(Sigma.numpy(), H.numpy()))
    mean = cov @ rhs.T.reshape(-1)
    return (torch.as_tensor(mean, dtype=torch.float64),
            torch.as_tensor(0.5 * (cov + cov.T), dtype=torch.float64))


def check_noise_projection(seed: int = 4, reps: int = 5) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(reps):
        p, q = 5, 2
        mixing = sample_mixing(p, q, rng)
        sigma = sample_spd(p, rng)
        d_prime, sigma_app, distance, _ = project_noise(sigma, mixing)
        ok, _ = check_dpn(mixing.h, sigma_app)
        if not ok:
            worst = max(worst, 1.0)
        # Stationarity of the objective at the returned diagonal.
        rinv = torch.linalg.solve_triangular(
            mixing.r, torch.eye(q, dtype=torch.float64), upper=True)
        prec = torch.linalg.inv(torch.as_tensor(sigma, dtype=torch.float64))
        blocks = decompose_symmetric(prec, mixing)
        delta = blocks.top - rinv.T @ torch.diag(d_prime) @ rinv
        grad = torch.diagonal(rinv @ delta @ rinv.T)
        worst = max(worst, float(torch.max(torch.abs(grad))))
        # Already-compatible noise projects to itself.
        params = sample_noise_params(p, q, rng)
        own = build_sigma(params)
        _, _, dist0, _ = project_noise(own, params.mixing)
        worst = max(worst, float(dist0))
    return CheckResult("diagonal noise projection optimality", worst, 1e-7)


def check_orthonormal_generator(seed: int = 5, reps: int = 5) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(reps):
        p = 6
        raw = rng.standard_normal((p, p))
        skew = raw - raw.T
        w = orthonormal_from_skew(skew)
        worst = max(
            worst,
            float(torch.max(torch.abs(
                w.T @ w - torch.eye(p, dtype=torch.float64)))),
            abs(float(torch.linalg.det(w)) - 1.0),
        )
    return CheckResult("orthonormal factor from skew generator", worst, 1e-10)


def check_gradients(seed: int = 6) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for variant in VARIANTS:
        cfg = DataGenConfig(n_tasks=4, n_lat=2, n_points=10, n_test=5,
                            seed=seed)
        train, _, _ = generate(cfg)
        model = LmcModel.create(variant, train, 2, seed=seed)
        worst = max(worst, gradient_fd_error(model, train))
    return CheckResult("loss gradient vs finite differences", worst, 1e-4)


def gradient_fd_error(model: LmcModel, data: Dataset,
                      step: float = 1e-5) -> float:
    """Worst relative disagreement between the analytic gradient and central
    finite differences of the loss over every free parameter coordinate."""
    grad = loss_gradient_vector(model, data)
    theta = model.parameter_vector().numpy().copy()
    fd = np.zeros_like(theta)
    for j in range(theta.size):
        h = step * max(1.0, abs(theta[j]))
        for sign in (1.0, -1.0):
            shifted = theta.copy()
            shifted[j] += sign * h
            model.set_parameter_vector(torch.as_tensor(shifted))
            with torch.no_grad():
                fd[j] += sign * float(model.loss(data))
        fd[j] /= 2.0 * h
    model.set_parameter_vector(torch.as_tensor(theta))
    scale = np.maximum(np.abs(fd), 1e-6 * max(1.0, np.max(np.abs(fd))))
    return float(np.max(np.abs(grad - fd) / scale))


ALL_CHECKS: List[Callable[[], CheckResult]] = [
    check_posterior_decoupling,
    check_mll_equivalence,
    check_projection_identities,
    check_latent_block_structure,
    check_noise_projection,
    check_orthonormal_generator,
    check_gradients,
]


def run_all(verbose: bool = True) -> List[CheckResult]:
    results = [check() for check in ALL_CHECKS]
    if verbose:
        for res in results:
            status = "PASS" if res.passed else "FAIL"
            print(f"[{status}] {res.name}: max deviation {res.max_deviation:.3e}"
                  f" (tolerance {res.tolerance:.0e})")
    return results
