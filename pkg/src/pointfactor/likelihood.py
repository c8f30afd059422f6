"""Poisson point-process log likelihood and gradients for one study.

The log density of a focus pattern under intensity exp(b(v)' theta) is,
up to a data-only constant,

    sum_j b(x_ij)' theta  -  integral of exp(b(v)' theta) over the mask.

The additive data constant is dropped throughout; only differences in
theta ever matter to the sampler.  Gradients use exactly the same
voxel-center quadrature as the likelihood.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import (
    MAX_LOG_INTENSITY,
    BasisSet,
    IntensityOverflowError,
    VolumeGrid,
)


@dataclass
class Study:
    """One study: identifier, foci, optional label and covariates.

    ``label`` is 1 for type-1 studies, 0 for type-0, None when unknown.
    ``focus_design`` caches basis values at the foci and is filled in by
    :func:`attach_basis`.
    """

    id: str
    foci: np.ndarray
    label: int | None = None
    covariates: np.ndarray | None = None
    focus_design: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.foci = np.asarray(self.foci, dtype=float).reshape(-1, 3)
        if self.label is not None:
            self.label = int(self.label)
            if self.label not in (0, 1):
                raise ValueError(f"study {self.id}: label must be 0 or 1")
        if self.covariates is not None:
            self.covariates = np.asarray(self.covariates, dtype=float).ravel()

    @property
    def n_foci(self) -> int:
        return self.foci.shape[0]


def attach_basis(study: Study, basis: BasisSet) -> Study:
    """Cache the n_i x p focus design matrix on the study."""
    study.focus_design = basis.design_at(study.foci) if study.n_foci else \
        np.zeros((0, basis.p))
    return study


def _focus_design(study: Study, basis: BasisSet) -> np.ndarray:
    if study.focus_design is not None and study.focus_design.shape[1] == basis.p:
        return study.focus_design
    return basis.design_at(study.foci) if study.n_foci else np.zeros((0, basis.p))


def log_lik(study: Study, basis: BasisSet, grid: VolumeGrid, theta) -> float:
    """Point-process log likelihood up to the data-only constant."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (basis.p,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({basis.p},)")
    design = _focus_design(study, basis)
    log_int = basis.voxel_design @ theta
    mx = log_int.max()
    if mx > MAX_LOG_INTENSITY:
        raise IntensityOverflowError(mx)
    integral = np.exp(log_int).sum() * grid.voxel_volume
    return float((design @ theta).sum() - integral)


def grad_log_lik(study: Study, basis: BasisSet, grid: VolumeGrid, theta) -> np.ndarray:
    """Exact gradient of :func:`log_lik` under the voxel quadrature."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (basis.p,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({basis.p},)")
    design = _focus_design(study, basis)
    log_int = basis.voxel_design @ theta
    mx = log_int.max()
    if mx > MAX_LOG_INTENSITY:
        raise IntensityOverflowError(mx)
    weights = np.exp(log_int) * grid.voxel_volume
    return design.sum(axis=0) - basis.voxel_design.T @ weights


def gaussian_log_density(theta, mean, sigma_diag) -> float:
    """Diagonal-Gaussian log density, additive constant dropped."""
    sigma_diag = np.asarray(sigma_diag, dtype=float)
    if np.any(sigma_diag <= 0):
        raise ValueError("non-positive variance in Sigma_diag")
    resid = np.asarray(theta, dtype=float) - np.asarray(mean, dtype=float)
    return float(-0.5 * np.sum(resid * resid / sigma_diag))


def gaussian_log_density_grad(theta, mean, sigma_diag) -> np.ndarray:
    sigma_diag = np.asarray(sigma_diag, dtype=float)
    if np.any(sigma_diag <= 0):
        raise ValueError("non-positive variance in Sigma_diag")
    resid = np.asarray(theta, dtype=float) - np.asarray(mean, dtype=float)
    return -resid / sigma_diag


def log_post_theta(study: Study, basis: BasisSet, grid: VolumeGrid,
                   theta, mean, sigma_diag) -> float:
    """Log likelihood plus conditional Gaussian prior on theta."""
    return log_lik(study, basis, grid, theta) + \
        gaussian_log_density(theta, mean, sigma_diag)


def grad_log_post_theta(study: Study, basis: BasisSet, grid: VolumeGrid,
                        theta, mean, sigma_diag) -> np.ndarray:
    return grad_log_lik(study, basis, grid, theta) + \
        gaussian_log_density_grad(theta, mean, sigma_diag)


# ---------------------------------------------------------------------------
# Batched evaluation used by the sampler.  Rows are studies; every study in
# a batch shares the voxel design matrix.  Overflowing rows are flagged
# rather than raised so one divergent proposal cannot abort a sweep; their
# values are clamped purely to keep the arithmetic finite and the flag
# forces rejection downstream.
# ---------------------------------------------------------------------------


def stack_focus_sums(studies, basis: BasisSet) -> np.ndarray:
    """n x p matrix whose row i is sum_j b(x_ij) for study i."""
    out = np.zeros((len(studies), basis.p))
    for i, s in enumerate(studies):
        if s.n_foci:
            out[i] = _focus_design(s, basis).sum(axis=0)
    return out


def batch_log_lik_grad(thetas, focus_sums, voxel_design, voxel_volume):
    """Log likelihood and gradient for a batch of studies.

    Returns (loglik (c,), grad (c, p), overflow (c,)).  Rows flagged in
    ``overflow`` carry clamped, meaningless values and must be rejected by
    the caller.
    """
    thetas = np.asarray(thetas, dtype=float)
    log_int = thetas @ voxel_design.T
    row_max = log_int.max(axis=1)
    overflow = (row_max > MAX_LOG_INTENSITY) | ~np.isfinite(row_max)
    if np.any(overflow):
        log_int = np.where(np.isfinite(log_int), log_int, MAX_LOG_INTENSITY)
        np.clip(log_int, None, MAX_LOG_INTENSITY, out=log_int)
    weights = np.exp(log_int)
    weights *= voxel_volume
    loglik = (thetas * focus_sums).sum(axis=1) - weights.sum(axis=1)
    grad = focus_sums - weights @ voxel_design
    return loglik, grad, overflow


def batch_log_post_grad(thetas, focus_sums, voxel_design, voxel_volume,
                        means, sigma_diag):
    """Batched conditional log posterior of theta and its gradient."""
    loglik, grad, overflow = batch_log_lik_grad(
        thetas, focus_sums, voxel_design, voxel_volume)
    resid = np.asarray(thetas, dtype=float) - means
    inv_var = 1.0 / sigma_diag
    logpost = loglik - 0.5 * ((resid * resid) * inv_var).sum(axis=1)
    grad = grad - resid * inv_var
    return logpost, grad, overflow
