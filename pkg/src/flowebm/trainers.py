"""Learning the correction network.

``nt_ebm_train`` is maximum likelihood with persistent latent-space HMC
chains ("neural transport"): every iteration advances the chains, pushes
them through the frozen flow, and ascends

    mean f(data) - mean f(synthesised)

with Adam.  ``nce_train`` fits ``b + f(x)`` as the logit of a classifier
between data and flow samples.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .energy import EnergyModel, TiltedModel
from .flow import FlowModel, TrainingDivergence
from .samplers import ChainState, HmcConfig, hmc_step, init_chains_from_prior

logger = logging.getLogger(__name__)


def _lr_at(base: float, schedule: str, it: int, total: int) -> float:
    if schedule == "constant":
        return base
    if schedule == "linear":
        return base * max(1.0 - it / total, 0.0) + 1e-12
    raise ValueError(f"unknown lr schedule {schedule!r}")


@dataclass
class NtTrainConfig:
    iterations: int = 40000
    lr: float = 5e-5
    batch_size: int = 64
    hmc: HmcConfig = field(default_factory=HmcConfig)
    clip_norm: Optional[float] = 100.0
    weight_decay: float = 0.0
    betas: Tuple[float, float] = (0.99, 0.999)
    lr_schedule: str = "constant"
    seed: int = 0
    log_every: int = 500

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")


@dataclass
class NtTrace:
    gap: List[float] = field(default_factory=list)
    acceptance: List[float] = field(default_factory=list)
    step_size: List[float] = field(default_factory=list)
    grad_norm: List[float] = field(default_factory=list)
    divergences: int = 0


def ebm_grad_estimate(energy: EnergyModel, data: np.ndarray, synth: np.ndarray) -> Tuple[List[np.ndarray], float]:
    """Monte-Carlo log-likelihood gradient and energy gap.

    Returns ``(grads, gap)`` with ``grads`` aligned to ``energy.parameters()``:
    the gradient of ``mean f(data) - mean f(synth)``, i.e. the ascent
    direction of the log-likelihood.
    """
    data = np.asarray(data, dtype=np.float64)
    synth = np.asarray(synth, dtype=np.float64)
    if len(data) == 0 or len(synth) == 0:
        raise ValueError("both batches must be non-empty")
    if data.shape[1:] != synth.shape[1:]:
        raise ad.ShapeError(f"data batch {data.shape} and synthesised batch {synth.shape} differ")
    params = energy.parameters()
    with ad.Tape() as tape:
        obj = ad.sub(ad.mean(energy(data)), ad.mean(energy(synth)))
    gap = obj.item()
    grads = tape.gradient(obj, params)
    return grads, gap


def nt_ebm_train(
    flow: FlowModel,
    energy: EnergyModel,
    data: np.ndarray,
    config: Optional[NtTrainConfig] = None,
    chains: Optional[Sequence[ChainState]] = None,
) -> Tuple[EnergyModel, NtTrace, List[ChainState]]:
    """Maximum-likelihood learning of ``energy`` with latent HMC (flow frozen).

    Persistent chains start from N(0, I) unless ``chains`` is supplied and
    are returned so training can be resumed.
    """
    config = config or NtTrainConfig()
    data = np.asarray(data, dtype=np.float64)
    if len(data) == 0:
        raise ValueError("empty dataset")
    if data.shape[1] != flow.dim:
        raise ad.ShapeError(f"data dim {data.shape[1]} does not match flow dim {flow.dim}")
    rng = np.random.default_rng([config.seed, 1])
    model = TiltedModel(flow, energy)
    if chains is None:
        chains = init_chains_from_prior(config.batch_size, flow.dim, config.hmc.step_size, seed=config.seed)
    chains = list(chains)
    params = energy.parameters()
    opt = ad.Adam(params, lr=config.lr, betas=config.betas, weight_decay=config.weight_decay)
    trace = NtTrace()
    for it in range(config.iterations):
        for c in chains:
            c.invalidate()
        acc = 0
        for _ in range(config.hmc.mcmc_steps):
            try:
                acc += int(np.sum(hmc_step(chains, model.latent_target, config.hmc, adapt=True)))
            except FloatingPointError as err:
                raise TrainingDivergence(f"sampler failure: {err}", it) from err
        z = np.stack([c.z for c in chains])
        synth = flow.push(z)
        batch = data[rng.integers(0, len(data), size=config.batch_size)]
        grads, gap = ebm_grad_estimate(energy, batch, synth)
        if not math.isfinite(gap) or not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingDivergence("non-finite energy or gradient", it)
        grads, norm = ad.clip_grad_norm(grads, config.clip_norm)
        opt.step([-g for g in grads], lr=_lr_at(config.lr, config.lr_schedule, it, config.iterations))
        trace.gap.append(gap)
        trace.acceptance.append(acc / (config.hmc.mcmc_steps * len(chains)))
        trace.step_size.append(float(np.mean([c.step_size for c in chains])))
        trace.grad_norm.append(norm)
        if config.log_every and (it + 1) % config.log_every == 0:
            logger.info(
                "nt iter %d gap %.4f accept %.3f eps %.4f",
                it + 1, float(np.mean(trace.gap[-config.log_every:])), trace.acceptance[-1], trace.step_size[-1],
            )
    trace.divergences = int(sum(c.divergences for c in chains))
    return energy, trace, chains


@dataclass
class NceTrainConfig:
    iterations: int = 80000
    lr: float = 1e-5
    batch_size: int = 128
    rho: float = 0.5
    bias_init: float = 0.0
    clip_norm: Optional[float] = 100.0
    weight_decay: float = 0.0
    betas: Tuple[float, float] = (0.99, 0.999)
    lr_schedule: str = "constant"
    seed: int = 0
    log_every: int = 1000

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        n_pos = int(round(self.rho * self.batch_size))
        if n_pos < 1 or n_pos >= self.batch_size:
            raise ValueError("batch_size too small for rho: need at least one positive and one negative")
        if self.iterations < 1 or not self.lr > 0:
            raise ValueError("iterations >= 1 and lr > 0 required")


@dataclass
class NceTrace:
    loss: List[float] = field(default_factory=list)
    bias: List[float] = field(default_factory=list)


def nce_loss(energy: EnergyModel, bias: Tensor, positives, negatives) -> Tensor:
    """Binary cross-entropy of logit ``b + f(x)``, written with softplus/log-sigmoid.

    ``-[sum_pos log sigmoid(l) + sum_neg log sigmoid(-l)] / n``; the negative
    term uses ``log sigmoid(-l) = -softplus(l)``.
    """
    lp = ad.add(energy(positives), bias)
    ln = ad.add(energy(negatives), bias)
    total = ad.sub(ad.sum(ad.softplus(ln)), ad.sum(ad.log_sigmoid(lp)))
    return ad.scale(total, 1.0 / (lp.shape[0] + ln.shape[0]))


def nce_train(
    flow: FlowModel, energy: EnergyModel, data: np.ndarray, config: Optional[NceTrainConfig] = None
) -> Tuple[EnergyModel, float, NceTrace]:
    """Noise-contrastive learning of ``energy`` against the flow; returns (energy, b, trace)."""
    config = config or NceTrainConfig()
    data = np.asarray(data, dtype=np.float64)
    if len(data) == 0:
        raise ValueError("empty dataset")
    if data.shape[1] != flow.dim:
        raise ad.ShapeError(f"data dim {data.shape[1]} does not match flow dim {flow.dim}")
    rng = np.random.default_rng([config.seed, 2])
    n_pos = int(round(config.rho * config.batch_size))
    n_neg = config.batch_size - n_pos
    bias = Tensor(np.asarray(config.bias_init, dtype=np.float64), requires_grad=True)
    params = energy.parameters() + [bias]
    opt = ad.Adam(params, lr=config.lr, betas=config.betas, weight_decay=config.weight_decay)
    trace = NceTrace()
    for it in range(config.iterations):
        pos = data[rng.integers(0, len(data), size=n_pos)]
        _, neg = flow.sample(n_neg, rng)
        with ad.Tape() as tape:
            loss = nce_loss(energy, bias, pos, neg)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergence("non-finite NCE loss", it)
        grads = tape.gradient(loss, params)
        if not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingDivergence("non-finite NCE gradient", it)
        grads, _ = ad.clip_grad_norm(grads, config.clip_norm)
        opt.step(grads, lr=_lr_at(config.lr, config.lr_schedule, it, config.iterations))
        trace.loss.append(value)
        trace.bias.append(float(bias.data))
        if config.log_every and (it + 1) % config.log_every == 0:
            logger.info("nce iter %d loss %.4f b %.4f", it + 1, float(np.mean(trace.loss[-config.log_every:])), trace.bias[-1])
    return energy, float(bias.data), trace
