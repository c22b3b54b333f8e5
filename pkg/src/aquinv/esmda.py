"""Ensemble smoother with multiple data assimilation.

Ensembles are ``(N_m, N_e)`` arrays whose columns are packed parameter
vectors; predictions are ``(N_d, N_e)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, LayoutError, NumericError
from .observations import perturb_observations

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InflationSchedule:
    alphas: tuple

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.alphas)
        object.__setattr__(self, "alphas", alphas)
        if not alphas or min(alphas) <= 0:
            raise DomainError("inflation coefficients must be positive")
        if abs(sum(1.0 / a for a in alphas) - 1.0) > 1e-12:
            raise DomainError(f"inflation coefficients must satisfy sum(1/alpha) = 1, got {alphas}")

    @classmethod
    def constant(cls, n_a):
        return cls((float(n_a),) * n_a)

    @property
    def n_a(self):
        return len(self.alphas)


@dataclass(frozen=True)
class PriorSpec:
    """Independent prior: ``z ~ N(0, z_std^2 I)``, uniform location and strengths."""

    layout: object
    sl_lower: tuple = (125.0, 125.0)
    sl_upper: tuple = (625.0, 1125.0)
    ss_lower: float = 50.0
    ss_upper: float = 1000.0
    z_std: float = 1.0

    def __post_init__(self):
        if any(lo > hi for lo, hi in zip(self.sl_lower, self.sl_upper)) or self.ss_lower > self.ss_upper:
            raise DomainError("prior lower bounds must not exceed upper bounds")

    def bounds(self):
        lay = self.layout
        lower = np.full(lay.size, -np.inf)
        upper = np.full(lay.size, np.inf)
        lower[lay.sl_slice], upper[lay.sl_slice] = self.sl_lower, self.sl_upper
        lower[lay.ss_slice], upper[lay.ss_slice] = self.ss_lower, self.ss_upper
        return lower, upper

    def sample(self, n_e, rng):
        lay = self.layout
        z = self.z_std * rng.standard_normal((lay.n_latent, n_e))
        sl = rng.uniform(np.array(self.sl_lower)[:, None], np.array(self.sl_upper)[:, None], (2, n_e))
        ss = rng.uniform(self.ss_lower, self.ss_upper, (lay.n_re, n_e))
        return lay.pack(z, sl, ss)

    def clamp(self, M):
        lower, upper = self.bounds()
        return np.clip(M, lower[:, None], upper[:, None])


def sample_prior(spec, n_e, seed):
    return spec.sample(n_e, np.random.default_rng(seed))


def ensemble_covariances(M, D):
    """Cross-covariance ``C_MD`` and prediction auto-covariance ``C_DD``."""
    M, D = np.asarray(M, float), np.asarray(D, float)
    n_e = M.shape[1]
    if n_e < 2 or D.shape[1] != n_e:
        raise LayoutError("need at least two members and matching ensemble sizes")
    dM = M - M.mean(axis=1, keepdims=True)
    dD = D - D.mean(axis=1, keepdims=True)
    return dM @ dD.T / (n_e - 1), dD @ dD.T / (n_e - 1)


def tsvd_pinv(C, energy=0.999):
    """Truncated-SVD pseudo-inverse keeping ``energy`` of the singular value sum.

    Returns ``(C_pinv, rank)``; an all-zero matrix maps to zeros with rank 0.
    """
    C = np.asarray(C, float)
    U, s, Vt = np.linalg.svd(C)
    total = s.sum()
    if total <= 0:
        return np.zeros_like(C.T), 0
    rank = int(np.searchsorted(np.cumsum(s), energy * total * (1 - 1e-14)) + 1)
    rank = min(rank, len(s))
    return (Vt[:rank].T / s[:rank]) @ U[:, :rank].T, rank


@dataclass
class UpdateReport:
    iteration: int
    alpha: float
    mismatch: float
    rank: int
    spread: np.ndarray = field(repr=False)

    def row(self, layout=None):
        out = dict(iteration=self.iteration, alpha=self.alpha, mismatch=self.mismatch, rank=self.rank)
        if layout is not None:
            out["spread_z"] = float(self.spread[layout.z_slice].mean()) if layout.n_latent else 0.0
            out["spread_sl"] = float(self.spread[layout.sl_slice].mean())
            out["spread_ss"] = float(self.spread[layout.ss_slice].mean())
        return out


def esmda_update(M, D_pred, d, alpha, cov, rng, prior=None, energy=0.999):
    """One ESMDA analysis step with inflated noise ``alpha * C_D``.

    ``cov`` is the variance vector or full ``C_D``.  Returns the updated
    ensemble and its :class:`UpdateReport` (iteration field left at 0).
    """
    M, D_pred = np.asarray(M, float), np.asarray(D_pred, float)
    d = np.asarray(d, float)
    if D_pred.shape != (d.shape[0], M.shape[1]):
        raise LayoutError(f"predictions {D_pred.shape} do not match data {d.shape} and ensemble {M.shape}")
    if alpha <= 0:
        raise DomainError("inflation coefficient must be positive")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    cov = np.asarray(cov, float)
    cov_mat = np.diag(cov) if cov.ndim == 1 else cov
    D_uc = perturb_observations(d, alpha, cov, M.shape[1], rng)
    C_MD, C_DD = ensemble_covariances(M, D_pred)
    C_inv, rank = tsvd_pinv(C_DD + alpha * cov_mat, energy)
    residual = D_uc - D_pred
    M_new = M + C_MD @ (C_inv @ residual)
    if prior is not None:
        M_new = prior.clamp(M_new)
    if not np.all(np.isfinite(M_new)):
        raise NumericError("ESMDA update produced non-finite parameters")
    mismatch = float(np.mean(np.linalg.norm(residual, axis=0)))
    return M_new, UpdateReport(0, float(alpha), mismatch, rank, M_new.std(axis=1, ddof=1))


def es_update(M, D_pred, d, cov, seed, prior=None, energy=0.999):
    """Single ensemble-smoother update (all data assimilated once)."""
    return esmda_update(M, D_pred, d, 1.0, cov, np.random.default_rng(seed), prior, energy)[0]


@dataclass
class EsmdaResult:
    ensembles: list          # M^1 .. M^{N_a+1}
    predictions: list        # g(M^1) .. g(M^{N_a+1})
    reports: list
    n_forward: int

    @property
    def final(self):
        return self.ensembles[-1]


def _evaluate(forward, M, prior, rng, counter):
    D = np.asarray(forward(M), float)
    counter[0] += M.shape[1]
    bad = ~np.all(np.isfinite(D), axis=0)
    if np.any(bad):
        if prior is None:
            raise NumericError(f"forward model failed for {bad.sum()} members")
        log.warning("resampling %d failed members from the prior", bad.sum())
        M = M.copy()
        M[:, bad] = prior.sample(int(bad.sum()), rng)
        D_retry = np.asarray(forward(M[:, bad]), float)
        counter[0] += int(bad.sum())
        if not np.all(np.isfinite(D_retry)):
            raise NumericError("forward model failed again after resampling")
        D[:, bad] = D_retry
    return M, D


def run_esmda(M0, forward, schedule, d, cov, seed, prior=None, energy=0.999, callback=None):
    """Iterate predict, perturb and update for every inflation coefficient.

    ``forward`` maps an ``(N_m, n)`` parameter block to ``(N_d, n)``
    predictions; non-finite columns mark failed members.  The final
    ensemble is re-evaluated, so ``N_e * (N_a + 1)`` forward runs are made.
    """
    rng = np.random.default_rng(seed)
    counter = [0]
    M = np.asarray(M0, float)
    ensembles, predictions, reports = [], [], []
    for it, alpha in enumerate(schedule.alphas, start=1):
        M, D = _evaluate(forward, M, prior, rng, counter)
        ensembles.append(M)
        predictions.append(D)
        M, rep = esmda_update(M, D, d, alpha, cov, rng, prior, energy)
        rep.iteration = it
        reports.append(rep)
        log.info("ESMDA iteration %d: alpha=%g mismatch=%.4g rank=%d", it, alpha, rep.mismatch, rep.rank)
        if callback is not None:
            callback(it, M, D, rep)
    M, D = _evaluate(forward, M, prior, rng, counter)
    ensembles.append(M)
    predictions.append(D)
    return EsmdaResult(ensembles, predictions, reports, counter[0])
