"""Mixing diagnostics for ensembles of Markov chains.

The Gelman-Rubin construction here follows the original two-estimator
form: within-chain variance ``s_w^2``, between-chain variance ``s_b^2`` and
the pooled ``sigma^2 = (n-1)/n s_w^2 + s_b^2/n``, with ``R = sqrt(sigma^2 / s_w^2)``.
It is computed per coordinate; mean and max are reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np


class DiagnosticsError(ValueError):
    pass


@dataclass
class ChainEnsemble:
    """Recorded chain history.

    ``positions`` has shape (m, n, d).  ``steps`` holds the sampler step
    number of every record (shared by all chains), so the record stride and
    burn-in are expressed in sampler steps.  ``energy`` is the potential
    ``-log p(z)`` up to a constant.
    """

    positions: np.ndarray
    steps: np.ndarray
    energy: np.ndarray
    accepted: np.ndarray
    step_size: np.ndarray
    burn_in: int = 0
    space: str = "z"

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 3:
            raise DiagnosticsError("positions must have shape (chains, records, dim)")
        m, n, _ = self.positions.shape
        self.steps = np.asarray(self.steps, dtype=np.int64)
        self.energy = np.asarray(self.energy, dtype=np.float64)
        self.accepted = np.asarray(self.accepted, dtype=bool)
        self.step_size = np.asarray(self.step_size, dtype=np.float64)
        if self.steps.shape != (n,):
            raise DiagnosticsError("one step label per record required")
        for name in ("energy", "accepted", "step_size"):
            if getattr(self, name).shape != (m, n):
                raise DiagnosticsError(f"{name} must have shape ({m}, {n})")

    @property
    def num_chains(self) -> int:
        return self.positions.shape[0]

    @property
    def num_records(self) -> int:
        return self.positions.shape[1]

    @property
    def dim(self) -> int:
        return self.positions.shape[2]

    @property
    def stride(self) -> int:
        if len(self.steps) < 2:
            return 1
        return int(self.steps[1] - self.steps[0])

    def post_burn_in(self) -> "ChainEnsemble":
        keep = self.steps > self.burn_in
        if not np.any(keep):
            raise DiagnosticsError(f"burn-in {self.burn_in} leaves no records")
        return ChainEnsemble(
            self.positions[:, keep],
            self.steps[keep],
            self.energy[:, keep],
            self.accepted[:, keep],
            self.step_size[:, keep],
            burn_in=self.burn_in,
            space=self.space,
        )

    def with_burn_in(self, burn_in: int) -> "ChainEnsemble":
        return replace(self, burn_in=burn_in)

    def strided(self, every: int) -> "ChainEnsemble":
        sl = slice(every - 1, None, every)
        return ChainEnsemble(
            self.positions[:, sl], self.steps[sl], self.energy[:, sl], self.accepted[:, sl],
            self.step_size[:, sl], burn_in=self.burn_in, space=self.space,
        )

    def map_positions(self, fn: Callable[[np.ndarray], np.ndarray], space: str = "x") -> "ChainEnsemble":
        """Apply a row-wise map (e.g. the flow push-forward) to all positions."""
        m, n, d = self.positions.shape
        mapped = np.asarray(fn(self.positions.reshape(m * n, d)))
        return replace(self, positions=mapped.reshape(m, n, -1), space=space)

    def select(self, chains) -> "ChainEnsemble":
        chains = np.asarray(chains)
        return ChainEnsemble(
            self.positions[chains], self.steps, self.energy[chains], self.accepted[chains],
            self.step_size[chains], burn_in=self.burn_in, space=self.space,
        )

    def acceptance_rate(self) -> float:
        return float(self.accepted.mean())


@dataclass
class GrReport:
    rhat: np.ndarray
    s_w2: np.ndarray
    s_b2: np.ndarray
    sigma2: np.ndarray
    degenerate: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def mean_rhat(self) -> float:
        return float(np.mean(self.rhat))

    @property
    def max_rhat(self) -> float:
        return float(np.max(self.rhat))

    @property
    def any_degenerate(self) -> bool:
        return bool(np.any(self.degenerate))


def gelman_rubin_array(x: np.ndarray) -> GrReport:
    """R-hat per coordinate for an array of shape (m, n) or (m, n, d)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    m, n, _ = x.shape
    if m < 2:
        raise DiagnosticsError("Gelman-Rubin needs at least 2 chains")
    if n < 2:
        raise DiagnosticsError("Gelman-Rubin needs at least 2 records per chain")
    chain_means = x.mean(axis=1)  # (m, d)
    grand = chain_means.mean(axis=0)
    s_w2 = ((x - chain_means[:, None, :]) ** 2).sum(axis=1).mean(axis=0) / (n - 1)
    s_b2 = n / (m - 1) * ((chain_means - grand) ** 2).sum(axis=0)
    sigma2 = (n - 1) / n * s_w2 + s_b2 / n
    degenerate = s_w2 <= 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.where(degenerate, np.inf, np.sqrt(sigma2 / np.where(degenerate, 1.0, s_w2)))
    return GrReport(rhat=rhat, s_w2=s_w2, s_b2=s_b2, sigma2=sigma2, degenerate=degenerate)


def gelman_rubin(ensemble: ChainEnsemble) -> GrReport:
    """Gelman-Rubin on the post-burn-in part of an ensemble."""
    return gelman_rubin_array(ensemble.post_burn_in().positions)


@dataclass
class AutocorrReport:
    lags: np.ndarray
    mean: np.ndarray
    min: np.ndarray
    max: np.ndarray
    excluded: int = 0

    def at(self, lag: int) -> float:
        return float(self.mean[lag])


def autocorr_series(x: np.ndarray, max_lag: int) -> np.ndarray:
    """Biased sample autocorrelation of a 1-D series for lags 0..max_lag.

    Normalised by the lag-0 sum of squares, so it is NaN for a constant series.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if max_lag >= n:
        raise DiagnosticsError(f"max_lag {max_lag} must be below series length {n}")
    c = x - x.mean()
    denom = float(c @ c)
    if denom == 0.0:
        return np.full(max_lag + 1, np.nan)
    size = 1 << int(math.ceil(math.log2(2 * n)))
    f = np.fft.rfft(c, size)
    acov = np.fft.irfft(f * np.conj(f), size)[: max_lag + 1]
    return acov / denom


def autocorrelation(ensemble: ChainEnsemble, max_lag: int, lags_in_steps: bool = False) -> AutocorrReport:
    """Per-lag mean/min/max autocorrelation over all chains and coordinates.

    Lags are in records; a zero-variance (chain, coordinate) series is
    excluded and counted in ``excluded``.
    """
    post = ensemble.post_burn_in()
    m, n, d = post.positions.shape
    if max_lag >= n:
        raise DiagnosticsError(f"max_lag {max_lag} must be below post-burn-in length {n}")
    curves = []
    excluded = 0
    for i in range(m):
        for j in range(d):
            rho = autocorr_series(post.positions[i, :, j], max_lag)
            if np.isnan(rho[0]):
                excluded += 1
                continue
            curves.append(rho)
    lags = np.arange(max_lag + 1) * (post.stride if lags_in_steps else 1)
    if not curves:
        nan = np.full(max_lag + 1, np.nan)
        return AutocorrReport(lags, nan, nan.copy(), nan.copy(), excluded)
    arr = np.asarray(curves)
    return AutocorrReport(lags, arr.mean(axis=0), arr.min(axis=0), arr.max(axis=0), excluded)


def mean_abs_autocorrelation(ensemble: ChainEnsemble, lag: int) -> float:
    """Mean |rho(lag)| over chains and coordinates (constant series skipped)."""
    post = ensemble.post_burn_in()
    vals = []
    for i in range(post.num_chains):
        for j in range(post.dim):
            rho = autocorr_series(post.positions[i, :, j], lag)
            if not np.isnan(rho[0]):
                vals.append(abs(rho[lag]))
    return float(np.mean(vals)) if vals else float("nan")


@dataclass
class ModeCoverage:
    counts: np.ndarray
    unassigned: int
    entropy: float
    normalized_entropy: float

    @property
    def visited(self) -> int:
        return int(np.count_nonzero(self.counts))


def mode_coverage(samples: np.ndarray, centers: np.ndarray, radius: float = np.inf) -> ModeCoverage:
    """Assign samples to the nearest center within ``radius`` and summarise visits.

    ``entropy`` is the Shannon entropy (nats) of the visit distribution over
    centers; ``normalized_entropy`` divides it by ``log(k)``.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if len(centers) == 0:
        raise DiagnosticsError("no mode centers given")
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    dist2 = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
    nearest = dist2.argmin(axis=1)
    inside = dist2[np.arange(len(x)), nearest] <= radius * radius
    counts = np.bincount(nearest[inside], minlength=len(centers))
    total = counts.sum()
    if total == 0:
        ent = 0.0
    else:
        p = counts[counts > 0] / total
        ent = float(-(p * np.log(p)).sum())
    k = len(centers)
    norm = ent / math.log(k) if k > 1 else 0.0
    return ModeCoverage(counts=counts, unassigned=int(len(x) - total), entropy=ent, normalized_entropy=norm)


def per_chain_mode_entropy(ensemble: ChainEnsemble, centers: np.ndarray, radius: float = np.inf) -> np.ndarray:
    """Visit entropy of every chain separately (post burn-in positions)."""
    post = ensemble.post_burn_in()
    return np.array([mode_coverage(post.positions[i], centers, radius).entropy for i in range(post.num_chains)])


# ---------------------------------------------------------------------------
# grid densities


def grid_points(lo: float = -6.0, hi: float = 6.0, size: int = 200):
    """Cell-centre grid; returns (points (size*size, 2), cell area, axis ticks)."""
    h = (hi - lo) / size
    ticks = lo + h * (np.arange(size) + 0.5)
    gx, gy = np.meshgrid(ticks, ticks, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1), h * h, ticks


def grid_normalize(log_density: np.ndarray, cell_area: float):
    """Quadrature normaliser: returns (normalised log density, log Z)."""
    lmax = float(np.max(log_density))
    log_z = lmax + math.log(float(np.sum(np.exp(log_density - lmax)))) + math.log(cell_area)
    return log_density - log_z, log_z


def grid_kl(log_target: np.ndarray, log_model: np.ndarray, cell_area: float) -> float:
    """KL(target || model) by grid quadrature, each density normalised on the grid."""
    lt, _ = grid_normalize(np.asarray(log_target, dtype=np.float64), cell_area)
    lm, _ = grid_normalize(np.asarray(log_model, dtype=np.float64), cell_area)
    p = np.exp(lt)
    mask = p > 0
    return float(np.sum(p[mask] * (lt[mask] - lm[mask])) * cell_area)
