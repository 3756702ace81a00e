"""Joint parametrization of the mixing matrix and the inter-task noise.

The mixing matrix H (p x q) is stored through its QR factors.  The noise
covariance S (p x p) is represented in the orthonormal basis [Q | Q_perp]
through blocks of its precision matrix:

    S^-1 = G D+^-1 G^T,      G = [Q R^-T | Q_perp],
    D+^-1 = [[D, M], [M^T, B]],

with D = diag(1 / latent noise variances), M a free q x (p-q) coupling block
and B constrained so that the Schur complement B - M^T D^-1 M equals L L^T
for a lower-triangular factor L with positive diagonal.  Any noise built this
way projects to a *diagonal* matrix (H^T S^-1 H diagonal), which is exactly
the condition (DPN, "diagonally projectable noise") that lets the latent
posteriors of the multi-output model decouple.

The module also provides the reverse direction: splitting an arbitrary
symmetric matrix into its basis blocks, testing the DPN condition, and the
closed-form projection of an arbitrary SPD noise onto the nearest
DPN-compatible one.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch

from .exceptions import IndefiniteNoiseError

DPN_TOL = 1e-8
ORTHO_TOL = 1e-10
PROJECTION_CLAMP = 1e-10


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(torch.float64)
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def _eye(n: int) -> torch.Tensor:
    return torch.eye(n, dtype=torch.float64)


@dataclass(frozen=True)
class MixingQR:
    """QR split of the mixing matrix plus an orthonormal complement.

    q: p x q with orthonormal columns; r: q x q upper triangular with nonzero
    diagonal; q_perp: p x (p - q) orthonormal complement of q (possibly with
    zero columns when p == q).  The mixing matrix itself is ``h = q @ r``.
    """

    q: torch.Tensor
    r: torch.Tensor
    q_perp: torch.Tensor

    def __post_init__(self):
        object.__setattr__(self, "q", _t(self.q))
        object.__setattr__(self, "r", _t(self.r))
        object.__setattr__(self, "q_perp", _t(self.q_perp))
        p, k = self.q.shape
        if self.r.shape != (k, k):
            raise ValueError("r must be square with q's column count")
        if self.q_perp.shape != (p, p - k):
            raise ValueError("q_perp must have shape (p, p - q)")
        if torch.any(torch.diagonal(self.r) == 0):
            raise ValueError("r must have a nonzero diagonal")
        if not torch.allclose(torch.triu(self.r), self.r):
            raise ValueError("r must be upper triangular")
        for name, err in (
            ("q^T q", self.q.T @ self.q - _eye(k)),
            ("q_perp^T q_perp", self.q_perp.T @ self.q_perp - _eye(p - k)),
            ("q^T q_perp", self.q.T @ self.q_perp),
        ):
            if err.numel() and torch.linalg.matrix_norm(err) > 1e-8:
                raise ValueError(f"mixing basis is not orthonormal: {name}")

    @property
    def n_tasks(self) -> int:
        return self.q.shape[0]

    @property
    def n_latent(self) -> int:
        return self.q.shape[1]

    @property
    def h(self) -> torch.Tensor:
        return self.q @ self.r

    @property
    def q_plus(self) -> torch.Tensor:
        return torch.cat([self.q, self.q_perp], dim=1)

    @classmethod
    def from_mixing(cls, H) -> "MixingQR":
        """QR-factor a full-column-rank mixing matrix, fixing diag(r) > 0,
        and complete the basis with a deterministic orthonormal complement."""
        H = _t(H)
        p, k = H.shape
        if k > p:
            raise ValueError("mixing matrix must have at most p columns")
        q_full, r_full = torch.linalg.qr(H, mode="complete")
        q, r = q_full[:, :k], r_full[:k, :]
        sign = torch.sign(torch.diagonal(r))
        sign = torch.where(sign == 0, torch.ones_like(sign), sign)
        q = q * sign
        r = sign.unsqueeze(1) * r
        if torch.any(torch.abs(torch.diagonal(r)) < 1e-12):
            raise ValueError("mixing matrix is rank deficient")
        return cls(q=q, r=r, q_perp=q_full[:, k:])


@dataclass(frozen=True)
class SymmetricBlocks:
    """Blocks of a symmetric p x p matrix in the basis [Q | Q_perp]:
    top = Q^T S Q, bottom = Q_perp^T S Q_perp, cross = Q^T S Q_perp."""

    top: torch.Tensor
    bottom: torch.Tensor
    cross: torch.Tensor

    def reassemble(self, mixing: MixingQR) -> torch.Tensor:
        q, qp = mixing.q, mixing.q_perp
        s = q @ self.top @ q.T + qp @ self.bottom @ qp.T
        c = q @ self.cross @ qp.T
        return s + c + c.T


def decompose_symmetric(S, mixing: MixingQR) -> SymmetricBlocks:
    """Split a symmetric matrix into its [Q | Q_perp]-basis blocks."""
    S = _t(S)
    if S.shape[0] != S.shape[1]:
        raise ValueError("matrix must be square")
    asym = torch.linalg.matrix_norm(S - S.T, ord=torch.inf)
    if asym > 1e-8 * max(1.0, float(torch.linalg.matrix_norm(S, ord=torch.inf))):
        raise ValueError(f"matrix is not symmetric (asymmetry {float(asym):g})")
    S = 0.5 * (S + S.T)
    q, qp = mixing.q, mixing.q_perp
    return SymmetricBlocks(top=q.T @ S @ q, bottom=qp.T @ S @ qp, cross=q.T @ S @ qp)


@dataclass(frozen=True)
class NoiseParams:
    """A (mixing, noise) pair satisfying the DPN condition by construction.

    proj_noise: length-q vector of per-latent noise *variances* (the diagonal
        of the projected noise matrix).
    coupling:   q x (p-q) block tying projected and complement-space noise
        (zero under the block-diagonal-noise restriction).
    comp_chol:  (p-q) x (p-q) lower-triangular Cholesky factor of the
        complement-space noise *precision* block (diagonal when the diagonal
        restriction is active, a positive multiple of I in OILMM form).
    """

    mixing: MixingQR
    proj_noise: torch.Tensor
    coupling: torch.Tensor
    comp_chol: torch.Tensor
    bdn: bool = False
    diag_b: bool = False
    oilmm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "proj_noise", _t(self.proj_noise).reshape(-1))
        object.__setattr__(self, "coupling", _t(self.coupling))
        object.__setattr__(self, "comp_chol", _t(self.comp_chol))
        p, k = self.mixing.n_tasks, self.mixing.n_latent
        if self.proj_noise.shape != (k,):
            raise ValueError("proj_noise must have one variance per latent")
        if torch.any(self.proj_noise <= 0):
            raise ValueError("proj_noise entries must be positive")
        if self.coupling.shape != (k, p - k):
            raise ValueError("coupling must be q x (p - q)")
        if self.comp_chol.shape != (p - k, p - k):
            raise ValueError("comp_chol must be (p - q) x (p - q)")
        if (p - k) and torch.any(torch.diagonal(self.comp_chol) <= 0):
            raise ValueError("comp_chol diagonal must be positive")
        if not torch.allclose(torch.tril(self.comp_chol), self.comp_chol):
            raise ValueError("comp_chol must be lower triangular")
        if (self.bdn or self.oilmm) and torch.any(self.coupling != 0):
            raise ValueError("flagged variant requires zero coupling")
        off = self.comp_chol - torch.diag(torch.diagonal(self.comp_chol))
        if (self.diag_b or self.oilmm) and torch.any(off != 0):
            raise ValueError("flagged variant requires diagonal comp_chol")
        if self.oilmm:
            d = torch.diagonal(self.comp_chol)
            if d.numel() and not torch.allclose(d, d[0]):
                raise ValueError("oilmm requires comp_chol to be scalar * I")
            rd = self.mixing.r - torch.diag(torch.diagonal(self.mixing.r))
            if torch.any(rd != 0) or torch.any(torch.diagonal(self.mixing.r) <= 0):
                raise ValueError("oilmm requires a positive diagonal r")

    @property
    def n_tasks(self) -> int:
        return self.mixing.n_tasks

    @property
    def n_latent(self) -> int:
        return self.mixing.n_latent


class PrecisionBlocks(NamedTuple):
    """Blocks of the transformed precision [[d, m], [m^T, b]] (d diagonal)."""

    d: torch.Tensor      # length-q vector, 1 / proj_noise
    m: torch.Tensor      # q x (p-q)
    b: torch.Tensor      # (p-q) x (p-q)


class CovarianceBlocks(NamedTuple):
    """Blocks of the transformed covariance [[d_t, m_t], [m_t^T, b_t]]."""

    d_t: torch.Tensor    # q x q
    m_t: torch.Tensor    # q x (p-q)
    b_t: torch.Tensor    # (p-q) x (p-q), the complement-space noise block


def precision_blocks(params: NoiseParams) -> PrecisionBlocks:
    d = 1.0 / params.proj_noise
    m = params.coupling
    b_inv_schur = params.comp_chol @ params.comp_chol.T
    b = b_inv_schur + m.T @ (params.proj_noise.unsqueeze(1) * m)
    return PrecisionBlocks(d=d, m=m, b=b)


def covariance_blocks(params: NoiseParams) -> CovarianceBlocks:
    """Blockwise (Schur-complement) inverse of the transformed precision."""
    sp = params.proj_noise
    m = params.coupling
    if params.comp_chol.shape[0] == 0:
        q = params.n_latent
        return CovarianceBlocks(
            d_t=torch.diag(sp),
            m_t=torch.zeros((q, 0), dtype=torch.float64),
            b_t=torch.zeros((0, 0), dtype=torch.float64),
        )
    # The Schur complement b - m^T d^-1 m equals comp_chol comp_chol^T by
    # construction, so b_t comes from two triangular solves.
    linv = torch.linalg.solve_triangular(
        params.comp_chol, _eye(params.comp_chol.shape[0]), upper=False
    )
    b_t = linv.T @ linv
    m_t = -sp.unsqueeze(1) * (m @ b_t)
    d_t = torch.diag(sp) + (sp.unsqueeze(1) * m) @ b_t @ (m.T * sp.unsqueeze(0))
    return CovarianceBlocks(d_t=d_t, m_t=m_t, b_t=b_t)


def _g_inv_transpose(params: NoiseParams) -> torch.Tensor:
    """[Q R^-T | Q_perp], the left factor of the precision factorization."""
    mix = params.mixing
    rinv_t = torch.linalg.solve_triangular(
        mix.r, _eye(mix.n_latent), upper=True
    ).T
    return torch.cat([mix.q @ rinv_t, mix.q_perp], dim=1)


def build_sigma_inverse(params: NoiseParams) -> torch.Tensor:
    """Assemble the p x p noise precision from the parameter blocks."""
    d, m, b = precision_blocks(params)
    k = d.shape[0]
    p = params.n_tasks
    core = torch.zeros((p, p), dtype=torch.float64)
    core[:k, :k] = torch.diag(d)
    core[:k, k:] = m
    core[k:, :k] = m.T
    core[k:, k:] = b
    g = _g_inv_transpose(params)
    out = g @ core @ g.T
    return 0.5 * (out + out.T)


def build_sigma(params: NoiseParams) -> torch.Tensor:
    """Assemble the p x p noise covariance via the blockwise inverse."""
    d_t, m_t, b_t = covariance_blocks(params)
    k = params.n_latent
    p = params.n_tasks
    core = torch.zeros((p, p), dtype=torch.float64)
    core[:k, :k] = d_t
    core[:k, k:] = m_t
    core[k:, :k] = m_t.T
    core[k:, k:] = b_t
    mix = params.mixing
    g = torch.cat([mix.h, mix.q_perp], dim=1)
    out = g @ core @ g.T
    out = 0.5 * (out + out.T)
    try:
        torch.linalg.cholesky(out)
    except torch.linalg.LinAlgError:
        raise IndefiniteNoiseError(
            "assembled noise covariance is not positive definite"
        ) from None
    return out


def compute_t(params: NoiseParams) -> torch.Tensor:
    """The q x p projection matrix: a generalized inverse of the mixing
    matrix whose rows extract the per-latent data summaries."""
    mix = params.mixing
    rinv_qt = torch.linalg.solve_triangular(mix.r, mix.q.T, upper=True)
    return rinv_qt + params.proj_noise.unsqueeze(1) * (
        params.coupling @ mix.q_perp.T
    )


def check_dpn(H, Sigma, tol: float = DPN_TOL):
    """Test whether H^T Sigma^-1 H is diagonal (relative to its largest
    diagonal entry).  Returns (is_dpn, max_offdiagonal_magnitude)."""
    H = _t(H)
    Sigma = _t(Sigma)
    try:
        chol = torch.linalg.cholesky(Sigma)
    except torch.linalg.LinAlgError:
        raise IndefiniteNoiseError("noise covariance must be SPD") from None
    w = torch.cholesky_solve(H, chol)
    proj = H.T @ w
    off = proj - torch.diag(torch.diagonal(proj))
    max_off = float(torch.max(torch.abs(off))) if off.numel() else 0.0
    max_diag = float(torch.max(torch.abs(torch.diagonal(proj))))
    return max_off <= tol * max_diag, max_off


class NoiseProjection(NamedTuple):
    d_prime: torch.Tensor       # length-q, optimal diagonal of the projected precision
    sigma_app: torch.Tensor     # p x p DPN-compatible covariance
    distance: torch.Tensor      # Frobenius distance between the precisions
    clamped: bool               # True if nonpositive entries had to be clamped


def project_noise(Sigma_opt, mixing: MixingQR) -> NoiseProjection:
    """Closest DPN-compatible precision to an arbitrary SPD noise.

    Only the top (latent-aligned) precision block is altered; the closed-form
    minimizer over diagonal targets solves the linear system
    (G .* G) v = diag(R^-1 A R^-T) with G = R^-1 R^-T.
    """
    Sigma_opt = _t(Sigma_opt)
    try:
        chol = torch.linalg.cholesky(Sigma_opt)
    except torch.linalg.LinAlgError:
        raise IndefiniteNoiseError("noise covariance must be SPD") from None
    prec = torch.cholesky_inverse(chol)
    prec = 0.5 * (prec + prec.T)
    blocks = decompose_symmetric(prec, mixing)
    k = mixing.n_latent
    rinv = torch.linalg.solve_triangular(mixing.r, _eye(k), upper=True)
    gram = rinv @ rinv.T
    target = torch.diagonal(rinv @ blocks.top @ rinv.T)
    d_prime = torch.linalg.solve(gram * gram, target)
    clamped = bool(torch.any(d_prime <= 0))
    if clamped:
        warnings.warn(
            "closed-form diagonal projection produced nonpositive entries; "
            f"clamping to {PROJECTION_CLAMP:g}",
            RuntimeWarning,
        )
        d_prime = torch.clamp(d_prime, min=PROJECTION_CLAMP)
    top_app = rinv.T @ torch.diag(d_prime) @ rinv
    prec_app = SymmetricBlocks(
        top=top_app, bottom=blocks.bottom, cross=blocks.cross
    ).reassemble(mixing)
    try:
        chol_app = torch.linalg.cholesky(prec_app)
    except torch.linalg.LinAlgError:
        raise IndefiniteNoiseError(
            "projected precision lost positive definiteness"
        ) from None
    sigma_app = torch.cholesky_inverse(chol_app)
    sigma_app = 0.5 * (sigma_app + sigma_app.T)
    distance = torch.linalg.matrix_norm(blocks.top - top_app)
    return NoiseProjection(d_prime, sigma_app, distance, clamped)


def orthonormal_from_skew(S) -> torch.Tensor:
    """Matrix exponential of a skew-symmetric generator (an SO(p) element)."""
    S = _t(S)
    if S.shape[0] != S.shape[1]:
        raise ValueError("generator must be square")
    scale = max(1.0, float(torch.linalg.matrix_norm(S, ord=torch.inf)))
    if float(torch.linalg.matrix_norm(S + S.T, ord=torch.inf)) > 1e-10 * scale:
        raise ValueError("generator must be skew-symmetric")
    return torch.linalg.matrix_exp(0.5 * (S - S.T))
