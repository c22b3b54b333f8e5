"""Sensor networks, the measurement operator and observation noise.

The data vector is ordered as ``[c(t_1) by sensor | ... | c(t_I) by sensor | h by sensor]``;
head is measured once because flow is steady.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, LayoutError


@dataclass(frozen=True)
class WellNetwork:
    sensors: tuple  # of (i, j, k)
    times: tuple    # observation times in days

    def __post_init__(self):
        sensors = tuple(tuple(int(v) for v in s) for s in self.sensors)
        object.__setattr__(self, "sensors", sensors)
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))
        if len(set(sensors)) != len(sensors):
            raise LayoutError("duplicate sensor cells")

    @classmethod
    def lattice(cls, i_values, j_values, layers, times):
        sensors = [(i, j, k) for i in i_values for j in j_values for k in layers]
        return cls(tuple(sensors), tuple(times))

    @property
    def n_sensors(self):
        return len(self.sensors)

    @property
    def n_times(self):
        return len(self.times)

    @property
    def n_data(self):
        return self.n_sensors * (self.n_times + 1)

    @property
    def index(self):
        return tuple(np.array(self.sensors).T)

    def validate(self, grid):
        for s in self.sensors:
            if not all(0 <= v < n for v, n in zip(s, grid.shape)):
                raise LayoutError(f"sensor {s} outside grid {grid.shape}")
        return self

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["sensor", "i", "j", "k"])
            for n, (i, j, k) in enumerate(self.sensors):
                w.writerow([n, i, j, k])

    @classmethod
    def read_csv(cls, path, times):
        with open(path, encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return cls(tuple((int(r["i"]), int(r["j"]), int(r["k"])) for r in rows), tuple(times))


@dataclass(frozen=True)
class NoiseModel:
    sigma_c: float = 0.5
    sigma_h: float = 0.5
    cov: np.ndarray | None = field(default=None, compare=False)  # optional full C_D

    def __post_init__(self):
        if self.sigma_c < 0 or self.sigma_h < 0:
            raise DomainError("noise standard deviations must be non-negative")

    def variances(self, wells):
        nc = wells.n_sensors * wells.n_times
        return np.concatenate([np.full(nc, self.sigma_c ** 2),
                               np.full(wells.n_sensors, self.sigma_h ** 2)])

    def covariance(self, wells):
        """``C_D`` as a dense matrix (diagonal unless a full matrix was given)."""
        if self.cov is not None:
            cov = np.asarray(self.cov, float)
            if cov.shape != (wells.n_data,) * 2:
                raise LayoutError("noise covariance does not match the data length")
            return cov
        return np.diag(self.variances(wells))


@dataclass(frozen=True)
class ObservationSet:
    d: np.ndarray
    tag: str = "clean"


def observe(snapshots, h, wells):
    """Gather sensor values from concentration snapshots and the head field."""
    snapshots = np.asarray(snapshots, float)
    if snapshots.shape[0] != wells.n_times:
        raise LayoutError(f"{snapshots.shape[0]} snapshots for {wells.n_times} observation times")
    shape = snapshots.shape[1:]
    for s in wells.sensors:
        if not all(0 <= v < n for v, n in zip(s, shape)):
            raise LayoutError(f"sensor {s} outside grid {shape}")
    i, j, k = wells.index
    conc = snapshots[:, i, j, k].reshape(-1)
    return ObservationSet(np.concatenate([conc, np.asarray(h)[i, j, k]]))


def observe_batch(snapshots, h, wells):
    """Vectorised :func:`observe` over a leading batch axis; returns ``(N_d, batch)``."""
    i, j, k = wells.index
    conc = snapshots[:, :, i, j, k].reshape(snapshots.shape[0], -1)
    return np.concatenate([conc, h[:, i, j, k]], axis=1).T


def _draw(rng, cov_or_var, size):
    cov_or_var = np.asarray(cov_or_var, float)
    if cov_or_var.ndim == 1:
        return rng.standard_normal((size, len(cov_or_var))) * np.sqrt(cov_or_var)
    if not np.any(cov_or_var - np.diag(np.diag(cov_or_var))):
        return rng.standard_normal((size, len(cov_or_var))) * np.sqrt(np.diag(cov_or_var))
    chol = np.linalg.cholesky(cov_or_var)
    return rng.standard_normal((size, len(cov_or_var))) @ chol.T


def add_noise(obs, cov, seed):
    """Corrupt a clean data vector with ``N(0, C_D)`` errors.

    ``cov`` is either the variance vector or the full covariance matrix.
    """
    d = obs.d if isinstance(obs, ObservationSet) else np.asarray(obs, float)
    rng = np.random.default_rng(seed)
    return ObservationSet(d + _draw(rng, cov, 1)[0], tag=f"corrupted:seed={seed}")


def perturb_observations(d, alpha, cov, n_e, rng):
    """``n_e`` draws of ``d + sqrt(alpha) * eps`` as columns of an ``(N_d, n_e)`` array."""
    if alpha <= 0:
        raise DomainError("inflation coefficient must be positive")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    d = np.asarray(d, float)
    return d[:, None] + np.sqrt(alpha) * _draw(rng, cov, n_e).T
