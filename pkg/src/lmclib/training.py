"""Maximum-marginal-likelihood fitting.

The protocol is fixed across variants: AdamW-style first-order optimization
with decoupled weight decay on kernel and noise parameters only, an
exponential learning-rate decay from ``lr_max`` down to ``lr_min`` over
``max_iters`` steps, and an early stop once consecutive loss values have
stayed within ``plateau_delta`` of each other for ``patience`` iterations.
The best parameters seen during training are restored at the end, so the
final loss can never exceed the initial one.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch

from .inference import Dataset
from .model import DEGENERATE_SINGULAR_VALUE, INIT_COMP_CHOL, INIT_NOISE_VAR, LmcModel

ADAM_BETAS = (0.9, 0.999)
MAX_STEP_RETRIES = 5


@dataclass
class TrainConfig:
    lr_max: float = 1e-2
    lr_min: float = 1e-3
    max_iters: int = 5000
    plateau_delta: float = 1e-4
    patience: int = 300
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if not (self.lr_max >= self.lr_min > 0):
            raise ValueError("need lr_max >= lr_min > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.plateau_delta > 0:
            raise ValueError("plateau_delta must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    @property
    def lr_decay(self) -> float:
        """Per-step factor taking the rate from lr_max to lr_min over
        max_iters steps."""
        return (self.lr_min / self.lr_max) ** (1.0 / self.max_iters)


@dataclass
class FitReport:
    n_iters: int
    wall_time: float
    final_loss: float
    loss_trace: List[float] = field(default_factory=list)
    stopped_early: bool = False


def init_from_svd(data: Dataset, n_latent: int,
                  rng: Optional[np.random.Generator] = None):
    """Rank-q truncated SVD initialization of the mixing matrix.

    Returns (H0, seeds) where H0 = U S holds the leading left singular
    vectors scaled by their singular values, and seeds carries the standard
    starting values for the remaining parameters.  Data of rank below q gets
    its trailing directions padded with random orthonormal columns carrying a
    tiny singular value.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    Y = data.Y.detach().numpy()
    p, n = Y.shape
    if not 1 <= n_latent <= min(p, n):
        raise ValueError("need 1 <= n_latent <= min(p, n)")
    u, s, _ = np.linalg.svd(Y, full_matrices=False)
    cutoff = max(p, n) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > cutoff))
    u, s = u[:, :n_latent].copy(), s[:n_latent].copy()
    if rank < n_latent:
        missing = np.arange(rank, n_latent)
        raw = rng.standard_normal((p, missing.size))
        if rank > 0:
            raw -= u[:, :rank] @ (u[:, :rank].T @ raw)
        filled, _ = np.linalg.qr(raw)
        u[:, missing] = filled[:, :missing.size]
        s[missing] = DEGENERATE_SINGULAR_VALUE
    h0 = torch.as_tensor(u * s, dtype=torch.float64)
    seeds = {
        "lengthscale": 1.0,
        "output_scale": 1.0,
        "noise_var": INIT_NOISE_VAR,
        "comp_chol": INIT_COMP_CHOL,
    }
    return h0, seeds


def _make_optimizer(model: LmcModel, config: TrainConfig) -> torch.optim.AdamW:
    decay_names = set(model.decay_parameter_names())
    params = model.parameters()
    groups = []
    decay_group = [params[k] for k in params if k in decay_names]
    plain_group = [params[k] for k in params if k not in decay_names]
    if decay_group:
        groups.append({"params": decay_group,
                       "weight_decay": config.weight_decay})
    if plain_group:
        groups.append({"params": plain_group, "weight_decay": 0.0})
    return torch.optim.AdamW(groups, lr=config.lr_max, betas=ADAM_BETAS)


def fit(model: LmcModel, data: Dataset, config: TrainConfig) -> FitReport:
    """Run the training protocol; mutates the model in place and leaves it at
    the best parameters encountered.

    The plateau test compares consecutive *per-observation* losses (the raw
    negative log likelihood divided by n * p), so that ``plateau_delta`` has
    a dataset-size-independent meaning.
    """
    torch.manual_seed(config.seed)
    start = time.perf_counter()
    optimizer = _make_optimizer(model, config)
    beta = config.lr_decay
    n_obs = data.n_points * data.n_tasks

    def snapshot() -> Dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in model._params.items()}

    def restore(state: Dict[str, torch.Tensor]):
        with torch.no_grad():
            for k, v in model._params.items():
                v.copy_(state[k])

    def forward() -> torch.Tensor:
        optimizer.zero_grad(set_to_none=True)
        return model.loss(data)

    lr_scale = 1.0
    loss_prev = forward()
    best_loss = float(loss_prev.detach())
    best_state = snapshot()
    if not math.isfinite(best_loss):
        raise RuntimeError(
            f"loss is non-finite at initialization (variant {model.variant})"
        )

    trace: List[float] = []
    streak = 0
    stopped_early = False
    for step in range(1, config.max_iters + 1):
        pre_step = snapshot()
        retries = 0
        while True:
            for group in optimizer.param_groups:
                group["lr"] = config.lr_max * (beta ** (step - 1)) * lr_scale
            loss_prev.backward()
            optimizer.step()
            model.post_step()
            loss_t = forward()
            if torch.isfinite(loss_t):
                break
            retries += 1
            if retries > MAX_STEP_RETRIES:
                raise RuntimeError(
                    f"non-finite loss at iteration {step} after "
                    f"{MAX_STEP_RETRIES} learning-rate reductions "
                    f"(variant {model.variant}, last good loss "
                    f"{trace[-1] if trace else best_loss:.6g})"
                )
            restore(pre_step)
            lr_scale *= 0.5
            loss_prev = forward()

        value = float(loss_t.detach())
        trace.append(value)
        if value < best_loss:
            best_loss = value
            best_state = snapshot()
        if abs(value - float(loss_prev.detach())) / n_obs < config.plateau_delta:
            streak += 1
            if streak >= config.patience:
                stopped_early = True
                loss_prev = loss_t
                break
        else:
            streak = 0
        loss_prev = loss_t

    restore(best_state)
    return FitReport(
        n_iters=len(trace),
        wall_time=time.perf_counter() - start,
        final_loss=best_loss,
        loss_trace=trace,
        stopped_early=stopped_early,
    )


def loss_gradient(model: LmcModel, data: Dataset) -> Dict[str, np.ndarray]:
    """Gradient of the training loss with respect to every free parameter."""
    for v in model.parameters().values():
        v.grad = None
    loss = model.loss(data)
    loss.backward()
    out = {}
    for name, v in model.parameters().items():
        grad = v.grad
        out[name] = (np.zeros(v.shape) if grad is None
                     else grad.detach().numpy().copy())
    return out


def loss_gradient_vector(model: LmcModel, data: Dataset) -> np.ndarray:
    """Flat gradient aligned with :meth:`LmcModel.parameter_vector`."""
    grads = loss_gradient(model, data)
    return np.concatenate([grads[name].reshape(-1)
                           for name in model.parameters()])
