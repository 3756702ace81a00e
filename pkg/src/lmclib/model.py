"""Trainable multi-output GP model in its six variants.

``exact`` keeps a free dense mixing matrix and a free dense noise covariance
(Cholesky-parametrized) and trains through the dense marginal likelihood.
The five projected variants share the structured noise parametrization of
:mod:`lmclib.noise` and differ only in which blocks are pinned:

=========  =====================  ==========================  ============
variant    coupling block         complement precision chol   mixing R
=========  =====================  ==========================  ============
proj       free                   dense lower triangular      triangular
diagproj   free                   diagonal                    triangular
bdn        zero                   dense lower triangular      triangular
bdn_diag   zero                   diagonal                    triangular
oilmm      zero                   positive scalar * I         positive diag
=========  =====================  ==========================  ============

The orthonormal factor pair (Q, Q_perp) is optimized jointly as the matrix
exponential of a single p x p skew-symmetric generator; when the initial
basis has no real logarithm the model falls back to storing the orthonormal
matrix directly and re-orthonormalizing it after every optimizer step.

All positive quantities (R and L diagonals, latent noise variances, kernel
hyperparameters) are stored as logs.
"""

from __future__ import annotations

import math
from typing import Dict, List, Optional

import numpy as np
import scipy.linalg
import torch

from .inference import (
    Dataset,
    PredictionResult,
    decoupled_posterior,
    naive_mll,
    naive_posterior,
    projected_mll,
)
from .kernels import Matern52Kernel
from .noise import MixingQR, NoiseParams, build_sigma

VARIANTS = ("exact", "proj", "diagproj", "bdn", "bdn_diag", "oilmm")
PROJECTED_VARIANTS = VARIANTS[1:]

# Initialization scales: kernel hyperparameters near 1, noise variances near
# 1e-2.  The complement-space noise block is (L L^T)^-1, so its Cholesky
# parameter starts at 10 * I to put that variance at 1e-2 as well.
INIT_NOISE_VAR = 1e-2
INIT_COMP_CHOL = 10.0
DEGENERATE_SINGULAR_VALUE = 1e-6


def _tril_indices(n: int, offset: int = -1):
    return torch.tril_indices(n, n, offset=offset)


def _fill_lower(n: int, diag_log: torch.Tensor,
                lower: Optional[torch.Tensor]) -> torch.Tensor:
    out = torch.diag(torch.exp(diag_log))
    if lower is not None and n > 1:
        idx = _tril_indices(n)
        out = out + torch.zeros((n, n), dtype=torch.float64).index_put(
            (idx[0], idx[1]), lower
        )
    return out


class LmcModel:
    """Variant tag plus trainable parameters; see the module docstring."""

    def __init__(self, variant: str, n_tasks: int, n_latent: int,
                 train_output_scale: bool = False):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; pick one of {VARIANTS}")
        if not 1 <= n_latent <= n_tasks:
            raise ValueError("need 1 <= n_latent <= n_tasks")
        self.variant = variant
        self.p = n_tasks
        self.q = n_latent
        self.train_output_scale = train_output_scale
        self.q_plus_mode = "generator"
        self._params: Dict[str, torch.Tensor] = {}

    # ------------------------------------------------------------------
    # construction

    @classmethod
    def create(cls, variant: str, data: Dataset, n_latent: int,
               seed: int = 0, train_output_scale: bool = False) -> "LmcModel":
        """Build a model initialized from the truncated SVD of the data."""
        from .training import init_from_svd

        model = cls(variant, data.n_tasks, n_latent,
                    train_output_scale=train_output_scale)
        h0, seeds = init_from_svd(data, n_latent,
                                  rng=np.random.default_rng(seed))
        model._init_parameters(h0, seeds, np.random.default_rng(seed + 1))
        return model

    def _init_parameters(self, h0: torch.Tensor, seeds: dict,
                         rng: np.random.Generator):
        p, q = self.p, self.q
        t64 = lambda a: torch.as_tensor(np.asarray(a), dtype=torch.float64)

        def param(name, value):
            tensor = t64(value).clone().requires_grad_(True)
            self._params[name] = tensor

        param("log_lengthscale", np.log(np.full(q, seeds["lengthscale"])))
        ls = t64(np.log(np.full(q, seeds["output_scale"])))
        ls.requires_grad_(self.train_output_scale)
        self._params["log_output_scale"] = ls

        if self.variant == "exact":
            param("mixing", h0)
            param("log_sigma_diag",
                  np.full(p, math.log(math.sqrt(seeds["noise_var"]))))
            if p > 1:
                param("sigma_lower", np.zeros(p * (p - 1) // 2))
            return

        mix = MixingQR.from_mixing(h0)
        param("log_r_diag", torch.log(torch.diagonal(mix.r)))
        if self.variant != "oilmm" and q > 1:
            idx = torch.triu_indices(q, q, offset=1)
            param("r_upper", mix.r[idx[0], idx[1]])
        param("log_proj_noise", np.full(q, math.log(seeds["noise_var"])))
        if self.variant in ("proj", "diagproj") and p > q:
            param("coupling", np.zeros((q, p - q)))
        k = p - q
        if self.variant == "oilmm":
            param("log_comp_scale", [math.log(seeds["comp_chol"])])
        else:
            if k > 0:
                param("log_l_diag", np.full(k, math.log(seeds["comp_chol"])))
            if self.variant in ("proj", "bdn") and k > 1:
                param("l_lower", np.zeros(k * (k - 1) // 2))

        self._init_orthonormal(mix, rng)

    def _init_orthonormal(self, mix: MixingQR, rng: np.random.Generator):
        p, q = self.p, self.q
        q0 = mix.q.detach().numpy()
        if p > q:
            raw = rng.standard_normal((p, p - q))
            raw -= q0 @ (q0.T @ raw)
            comp, _ = np.linalg.qr(raw)
            q_plus = np.concatenate([q0, comp], axis=1)
            if np.linalg.det(q_plus) < 0:
                q_plus[:, -1] = -q_plus[:, -1]
        else:
            q_plus = q0
        if np.linalg.det(q_plus) > 0:
            gen = scipy.linalg.logm(q_plus)
            gen = 0.5 * (np.real(gen) - np.real(gen).T)
            recon = scipy.linalg.expm(gen)
            if np.linalg.norm(recon - q_plus) <= 1e-8 * math.sqrt(p):
                idx = _tril_indices(p)
                gen_t = torch.as_tensor(gen, dtype=torch.float64)
                values = gen_t[idx[0], idx[1]].clone().requires_grad_(True)
                self._params["generator"] = values
                self.q_plus_mode = "generator"
                return
        # No well-conditioned real logarithm: store the orthonormal matrix
        # itself and re-orthonormalize after each optimizer step.
        self.q_plus_mode = "direct"
        self._params["q_plus"] = torch.as_tensor(
            q_plus, dtype=torch.float64
        ).clone().requires_grad_(True)

    # ------------------------------------------------------------------
    # assembled quantities

    def kernels(self) -> List[Matern52Kernel]:
        ls = torch.exp(self._params["log_lengthscale"])
        s = torch.exp(self._params["log_output_scale"])
        return [Matern52Kernel(lengthscale=ls[i], output_scale=s[i])
                for i in range(self.q)]

    def q_plus_matrix(self) -> torch.Tensor:
        if self.variant == "exact":
            raise ValueError("exact variant has no orthonormal factor")
        if self.q_plus_mode == "generator":
            p = self.p
            idx = _tril_indices(p)
            low = torch.zeros((p, p), dtype=torch.float64).index_put(
                (idx[0], idx[1]), self._params["generator"]
            )
            return torch.linalg.matrix_exp(low - low.T)
        return self._params["q_plus"]

    def _r_matrix(self) -> torch.Tensor:
        q = self.q
        r = torch.diag(torch.exp(self._params["log_r_diag"]))
        if "r_upper" in self._params:
            idx = torch.triu_indices(q, q, offset=1)
            r = r + torch.zeros((q, q), dtype=torch.float64).index_put(
                (idx[0], idx[1]), self._params["r_upper"]
            )
        return r

    def _comp_chol(self) -> torch.Tensor:
        k = self.p - self.q
        if self.variant == "oilmm":
            return torch.exp(self._params["log_comp_scale"]) * torch.eye(
                k, dtype=torch.float64
            )
        if k == 0:
            return torch.zeros((0, 0), dtype=torch.float64)
        return _fill_lower(k, self._params["log_l_diag"],
                           self._params.get("l_lower"))

    def noise_params(self) -> NoiseParams:
        if self.variant == "exact":
            raise ValueError("exact variant does not use the structured noise")
        q_plus = self.q_plus_matrix()
        mix = MixingQR(q=q_plus[:, :self.q], r=self._r_matrix(),
                       q_perp=q_plus[:, self.q:])
        k = self.p - self.q
        coupling = self._params.get(
            "coupling", torch.zeros((self.q, k), dtype=torch.float64)
        )
        return NoiseParams(
            mixing=mix,
            proj_noise=torch.exp(self._params["log_proj_noise"]),
            coupling=coupling,
            comp_chol=self._comp_chol(),
            bdn=self.variant in ("bdn", "bdn_diag", "oilmm"),
            diag_b=self.variant in ("diagproj", "bdn_diag", "oilmm"),
            oilmm=self.variant == "oilmm",
        )

    def mixing_matrix(self) -> torch.Tensor:
        if self.variant == "exact":
            return self._params["mixing"]
        return self.noise_params().mixing.h

    def sigma(self) -> torch.Tensor:
        """Assembled p x p noise covariance."""
        if self.variant == "exact":
            chol = _fill_lower(self.p, self._params["log_sigma_diag"],
                               self._params.get("sigma_lower"))
            return chol @ chol.T
        return build_sigma(self.noise_params())

    # ------------------------------------------------------------------
    # objective and prediction

    def mll(self, data: Dataset) -> torch.Tensor:
        if self.variant == "exact":
            return naive_mll(data, self._params["mixing"], self.sigma(),
                             self.kernels())
        return projected_mll(data, self.noise_params(), self.kernels())

    def loss(self, data: Dataset) -> torch.Tensor:
        return -self.mll(data)

    def predict(self, data: Dataset, Xstar,
                full_cov: bool = False) -> PredictionResult:
        with torch.no_grad():
            if self.variant == "exact":
                return naive_posterior(data, self._params["mixing"],
                                       self.sigma(), self.kernels(), Xstar,
                                       full_cov=full_cov)
            return decoupled_posterior(data, self.noise_params(),
                                       self.kernels(), Xstar,
                                       full_cov=full_cov)

    # ------------------------------------------------------------------
    # parameter access (used by the optimizer, gradient checks, checkpoints)

    def parameters(self) -> Dict[str, torch.Tensor]:
        """Trainable parameters by name."""
        return {k: v for k, v in self._params.items() if v.requires_grad}

    def decay_parameter_names(self) -> List[str]:
        """Kernel and noise parameters receive weight decay; the orthonormal
        factor and the mixing blocks do not."""
        decay = {"log_lengthscale", "log_output_scale", "log_proj_noise",
                 "coupling", "log_l_diag", "l_lower", "log_comp_scale",
                 "log_sigma_diag", "sigma_lower"}
        return [k for k in self.parameters() if k in decay]

    def post_step(self):
        """Re-orthonormalize the directly-stored basis after a step."""
        if self.variant != "exact" and self.q_plus_mode == "direct":
            with torch.no_grad():
                qm, rm = torch.linalg.qr(self._params["q_plus"])
                sign = torch.sign(torch.diagonal(rm))
                sign = torch.where(sign == 0, torch.ones_like(sign), sign)
                self._params["q_plus"].copy_(qm * sign)

    def parameter_vector(self) -> torch.Tensor:
        with torch.no_grad():
            return torch.cat([v.reshape(-1) for v in self.parameters().values()])

    def set_parameter_vector(self, vec: torch.Tensor):
        vec = torch.as_tensor(vec, dtype=torch.float64)
        with torch.no_grad():
            offset = 0
            for v in self.parameters().values():
                n = v.numel()
                v.copy_(vec[offset:offset + n].reshape(v.shape))
                offset += n
        if offset != vec.numel():
            raise ValueError("parameter vector has the wrong length")

    def state_dict(self) -> dict:
        return {
            "variant": self.variant,
            "n_tasks": self.p,
            "n_latent": self.q,
            "train_output_scale": self.train_output_scale,
            "q_plus_mode": self.q_plus_mode,
            "params": {k: v.detach().numpy().tolist()
                       for k, v in self._params.items()},
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "LmcModel":
        model = cls(state["variant"], state["n_tasks"], state["n_latent"],
                    train_output_scale=state["train_output_scale"])
        model.q_plus_mode = state["q_plus_mode"]
        for name, value in state["params"].items():
            tensor = torch.as_tensor(np.asarray(value), dtype=torch.float64)
            grad = not (name == "log_output_scale"
                        and not model.train_output_scale)
            model._params[name] = tensor.requires_grad_(grad)
        return model
