"""MCMC kernels: HMC with adaptive step size, unadjusted Langevin, and
magnetized Langevin paths.

Targets are callables mapping a batch of positions ``(m, d)`` to
``(log_density (m,), gradient (m, d))``.  Chains are advanced together as a
batch for speed, but every chain owns its random stream and draws from it in
a fixed order, so a chain's trajectory does not depend on which other chains
share its batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .diagnostics import ChainEnsemble

Target = Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]

TARGET_ACCEPT = 0.651
MIN_STEP, MAX_STEP = 1e-6, 1e2


class SamplerError(FloatingPointError):
    def __init__(self, message: str, chain: Optional[int] = None, position: Optional[np.ndarray] = None):
        detail = message
        if chain is not None:
            detail += f" (chain {chain})"
        if position is not None:
            detail += f" at position {np.array2string(np.asarray(position), precision=6)}"
        super().__init__(detail)
        self.chain = chain
        self.position = position


@dataclass
class HmcConfig:
    leapfrog_steps: int = 3
    mcmc_steps: int = 20
    step_size: float = 0.15
    target_accept: float = TARGET_ACCEPT
    adapt_gain: float = 0.01

    def __post_init__(self):
        if self.leapfrog_steps < 1 or self.mcmc_steps < 1:
            raise ValueError("leapfrog_steps and mcmc_steps must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.adapt_gain < 0:
            raise ValueError("adapt_gain must be non-negative")


@dataclass
class ChainState:
    """One persistent chain.  ``log_p``/``grad`` cache the target at ``z``."""

    z: np.ndarray
    step_size: float
    rng: np.random.Generator
    proposals: int = 0
    accepts: int = 0
    divergences: int = 0
    last_accepted: bool = False
    log_p: Optional[float] = None
    grad: Optional[np.ndarray] = None

    def __post_init__(self):
        self.z = np.array(self.z, dtype=np.float64).reshape(-1)
        if not self.step_size > 0:
            raise ValueError("step size must be positive")

    @property
    def acceptance_rate(self) -> float:
        return self.accepts / self.proposals if self.proposals else float("nan")

    def invalidate(self) -> None:
        """Drop the cached target values (call after the target changes)."""
        self.log_p = None
        self.grad = None


def init_chains(
    positions: np.ndarray, step_size: float = 0.15, seed: int = 0, seeds: Optional[Sequence[int]] = None
) -> List[ChainState]:
    """One ChainState per row; chain ``i`` gets stream ``(seed, i)`` unless ``seeds`` is given."""
    positions = np.atleast_2d(positions)
    if seeds is None:
        seeds = [np.random.SeedSequence([seed, i]) for i in range(len(positions))]
    return [ChainState(p, step_size, np.random.default_rng(s)) for p, s in zip(positions, seeds)]


def init_chains_from_prior(count: int, dim: int, step_size: float = 0.15, seed: int = 0) -> List[ChainState]:
    """Chains started from N(0, I), each draw taken from the chain's own stream."""
    chains = init_chains(np.zeros((count, dim)), step_size, seed)
    for c in chains:
        c.z = c.rng.standard_normal(dim)
    return chains


def leapfrog(z, p, grad, step_size, n_steps: int, target: Target):
    """``n_steps`` leapfrog steps for H = -log p(z) + |p|^2 / 2.

    ``step_size`` broadcasts against the batch (scalar or shape (m, 1)).
    Returns (z, p, log_p, grad) at the end point.
    """
    z = np.array(z, dtype=np.float64)
    p = np.array(p, dtype=np.float64)
    half = 0.5 * step_size
    p = p + half * grad
    logp = None
    for i in range(n_steps):
        z = z + step_size * p
        logp, grad = target(z)
        if i < n_steps - 1:
            p = p + step_size * grad
    p = p + half * grad
    return z, p, logp, grad


def hmc_proposal(z, log_p, grad, momentum, step_size, n_steps: int, target: Target):
    """One Metropolis-corrected HMC proposal for a batch.

    Returns ``(z_new, log_p_new, grad_new, accept_prob, divergent)``;
    non-finite Hamiltonians are divergent and get acceptance probability 0.
    """
    zn, pn, lpn, gn = leapfrog(z, momentum, grad, step_size, n_steps, target)
    h0 = -log_p + 0.5 * np.sum(momentum * momentum, axis=-1)
    h1 = -lpn + 0.5 * np.sum(pn * pn, axis=-1)
    with np.errstate(invalid="ignore", over="ignore"):
        log_ratio = h0 - h1
        finite = np.isfinite(log_ratio) & np.all(np.isfinite(zn), axis=-1)
        prob = np.where(finite, np.exp(np.minimum(0.0, np.where(finite, log_ratio, 0.0))), 0.0)
    return zn, lpn, gn, prob, ~finite


def _refresh(states: Sequence[ChainState], target: Target) -> None:
    missing = [i for i, s in enumerate(states) if s.log_p is None or s.grad is None]
    if not missing:
        return
    lp, g = target(np.stack([states[i].z for i in missing]))
    for k, i in enumerate(missing):
        states[i].log_p = float(lp[k])
        states[i].grad = g[k].copy()


def hmc_step(
    states: Sequence[ChainState], target: Target, config: HmcConfig, adapt: bool = True
) -> np.ndarray:
    """Advance every chain by one HMC transition (in place).

    Returns the boolean acceptance flags.  With ``adapt`` each chain's step
    size is multiplied by ``exp(gain * (accepted - target_accept))`` and
    clamped to ``[1e-6, 1e2]``.
    """
    if isinstance(states, ChainState):
        states = [states]
    _refresh(states, target)
    d = states[0].z.shape[0]
    z = np.stack([s.z for s in states])
    if z.shape[1] != d:
        raise ValueError("chains must share dimensionality")
    logp = np.array([s.log_p for s in states])
    grad = np.stack([s.grad for s in states])
    eps = np.array([s.step_size for s in states])[:, None]
    momentum = np.stack([s.rng.standard_normal(d) for s in states])
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            zn, lpn, gn, prob, divergent = hmc_proposal(z, logp, grad, momentum, eps, config.leapfrog_steps, target)
    except FloatingPointError:
        # some trajectory blew up inside the target; redo the proposals one chain at a time
        zn, lpn, gn, prob, divergent = _per_chain_proposals(z, logp, grad, momentum, eps, config, target)
    u = np.array([s.rng.uniform() for s in states])
    accepted = u < prob
    for i, s in enumerate(states):
        s.proposals += 1
        if divergent[i]:
            s.divergences += 1
        if accepted[i]:
            s.accepts += 1
            s.z = zn[i].copy()
            s.log_p = float(lpn[i])
            s.grad = gn[i].copy()
        s.last_accepted = bool(accepted[i])
        if adapt:
            s.step_size = float(
                np.clip(s.step_size * math.exp(config.adapt_gain * (float(accepted[i]) - config.target_accept)),
                        MIN_STEP, MAX_STEP)
            )
    return accepted


def _per_chain_proposals(z, logp, grad, momentum, eps, config, target):
    m, d = z.shape
    zn, lpn, gn, prob = z.copy(), logp.copy(), grad.copy(), np.zeros(m)
    divergent = np.zeros(m, dtype=bool)
    for i in range(m):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                a, b, c, p, dv = hmc_proposal(z[i : i + 1], logp[i : i + 1], grad[i : i + 1], momentum[i : i + 1],
                                              eps[i : i + 1], config.leapfrog_steps, target)
            zn[i], lpn[i], gn[i], prob[i], divergent[i] = a[0], b[0], c[0], p[0], dv[0]
        except FloatingPointError:
            divergent[i] = True
    return zn, lpn, gn, prob, divergent


def _record_ensemble(records, steps, space="z", burn_in=0) -> ChainEnsemble:
    pos, en, acc, eps = (np.stack(r, axis=1) for r in zip(*records)) if records else (None,) * 4
    return ChainEnsemble(pos, np.asarray(steps), en, acc, eps, burn_in=burn_in, space=space)


def run_chains(
    states: Sequence[ChainState],
    target: Target,
    config: HmcConfig,
    n_steps: int,
    record_every: int = 1,
    burn_in: int = 0,
    adapt: bool = True,
    space: str = "z",
) -> ChainEnsemble:
    """Run ``n_steps`` HMC transitions on every chain and record the history.

    Step-size adaptation runs during the first ``burn_in`` steps and is
    frozen afterwards (``adapt=False`` disables it entirely).  Records are
    taken after every ``record_every``-th transition.
    """
    if n_steps < 1 or record_every < 1:
        raise ValueError("n_steps and record_every must be >= 1")
    dims = {s.z.shape[0] for s in states}
    if len(dims) != 1:
        raise ValueError("all chains must share dimensionality")
    records, steps = [], []
    for t in range(n_steps):
        acc = hmc_step(states, target, config, adapt=adapt and t < burn_in)
        if (t + 1) % record_every == 0:
            records.append(_snapshot(states, acc))
            steps.append(t + 1)
    return _record_ensemble(records, steps, space, burn_in)


def _snapshot(states, accepted):
    return (
        np.stack([s.z for s in states]),
        np.array([-s.log_p for s in states]),
        np.asarray(accepted, dtype=bool).copy(),
        np.array([s.step_size for s in states]),
    )


def langevin_step(states: Sequence[ChainState], target: Target, step_size: Optional[float] = None) -> None:
    """Unadjusted overdamped Langevin: ``z += eps^2/2 * grad + eps * N(0, I)``.

    Uses each chain's own step size unless ``step_size`` is given.
    """
    if isinstance(states, ChainState):
        states = [states]
    _refresh(states, target)
    d = states[0].z.shape[0]
    z = np.stack([s.z for s in states])
    grad = np.stack([s.grad for s in states])
    eps = np.array([step_size if step_size is not None else s.step_size for s in states])[:, None]
    if np.any(eps <= 0):
        raise ValueError("Langevin step size must be positive")
    noise = np.stack([s.rng.standard_normal(d) for s in states])
    zn = z + 0.5 * eps * eps * grad + eps * noise
    bad = ~np.all(np.isfinite(zn), axis=1)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise SamplerError("non-finite Langevin update", chain=i, position=z[i])
    lp, g = target(zn)
    for i, s in enumerate(states):
        s.z = zn[i]
        s.log_p = float(lp[i])
        s.grad = g[i]
        s.proposals += 1
        s.accepts += 1
        s.last_accepted = True


def run_langevin(
    states: Sequence[ChainState],
    target: Target,
    step_size: float,
    n_steps: int,
    record_every: int = 1,
    burn_in: int = 0,
    space: str = "x",
) -> ChainEnsemble:
    for s in states:
        s.step_size = step_size
    records, steps = [], []
    for t in range(n_steps):
        langevin_step(states, target)
        if (t + 1) % record_every == 0:
            records.append(_snapshot(states, np.ones(len(states), dtype=bool)))
            steps.append(t + 1)
    return _record_ensemble(records, steps, space, burn_in)


# ---------------------------------------------------------------------------
# magnetized Langevin


@dataclass
class MagnetizedConfig:
    gamma: float = 1.0
    n_steps: int = 1000
    dt: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")


@dataclass
class MagnetizedPath:
    z: np.ndarray
    energy: np.ndarray
    distance: np.ndarray
    x: Optional[np.ndarray] = None

    @property
    def energy_band(self) -> float:
        return float(self.energy.max() - self.energy.min())


SINGULARITY_RADIUS = 1e-8


def magnetized_path(z1, z2, target: Target, config: MagnetizedConfig, push=None) -> MagnetizedPath:
    """Langevin ascent on ``U(z) - gamma * |z - z2|`` starting from ``z1``.

    ``target`` returns ``U`` and its gradient.  The magnetic drift has
    constant magnitude ``gamma`` towards the anchor ``z2`` and is dropped
    whenever the chain is within 1e-8 of it.  ``energy`` records ``U`` at
    every visited point including the start.
    """
    z = np.asarray(z1, dtype=np.float64).reshape(1, -1).copy()
    anchor = np.asarray(z2, dtype=np.float64).reshape(1, -1)
    if z.shape != anchor.shape:
        raise ValueError("z1 and z2 must have the same dimensionality")
    rng = np.random.default_rng(config.seed)
    noise_scale = math.sqrt(2.0 * config.dt)
    path = np.empty((config.n_steps + 1, z.shape[1]))
    energy = np.empty(config.n_steps + 1)
    u, g = target(z)
    path[0], energy[0] = z[0], u[0]
    for t in range(1, config.n_steps + 1):
        diff = z - anchor
        dist = float(np.linalg.norm(diff))
        drift = g.copy()
        if config.gamma > 0 and dist > SINGULARITY_RADIUS:
            drift -= config.gamma * diff / dist
        z = z + config.dt * drift + noise_scale * rng.standard_normal(z.shape)
        if not np.all(np.isfinite(z)):
            raise SamplerError("non-finite magnetized Langevin update", position=path[t - 1])
        u, g = target(z)
        path[t], energy[t] = z[0], u[0]
    distance = np.linalg.norm(path - anchor, axis=1)
    x = push(path) if push is not None else None
    return MagnetizedPath(z=path, energy=energy, distance=distance, x=x)


# ---------------------------------------------------------------------------
# analytic targets used in tests and calibration


def gaussian_target(mean=None, dim: int = 2) -> Target:
    """Standard-covariance Gaussian ``N(mean, I)`` as a sampler target."""
    mu = np.zeros(dim) if mean is None else np.asarray(mean, dtype=np.float64)

    def target(z):
        diff = z - mu
        return -0.5 * np.sum(diff * diff, axis=-1), -diff

    return target
