"""Experiment stages shared by the command-line driver and the test-suite.

Every stage is a deterministic function of a ``RunConfig`` (plus input
models), and every random draw comes from a stream derived from
``run.seed``.  The writers at the bottom emit plain CSV / text so that
plots can be produced by any external tool.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import RunConfig
from .datasets import SyntheticTarget, load_idx, make_target
from .diagnostics import (
    ChainEnsemble,
    DiagnosticsError,
    autocorrelation,
    gelman_rubin,
    grid_kl,
    grid_normalize,
    grid_points,
    mean_abs_autocorrelation,
    mode_coverage,
    per_chain_mode_entropy,
)
from .energy import EnergyModel, MLPEnergy, PolynomialEnergy, TiltedModel
from .flow import FlowModel, FlowTrace, FlowTrainConfig, train_flow_mle
from .io import write_table
from .samplers import (
    HmcConfig,
    MagnetizedConfig,
    MagnetizedPath,
    init_chains_from_prior,
    magnetized_path,
    run_chains,
    run_langevin,
)
from .trainers import NceTrainConfig, NtTrainConfig, nce_train, nt_ebm_train

logger = logging.getLogger(__name__)

# offsets that keep the streams of different stages apart
_SAMPLER_STREAM = 1
_INTERP_STREAM = 2


# ---------------------------------------------------------------------------
# data and models


def build_target(cfg: RunConfig) -> Optional[SyntheticTarget]:
    t = cfg.target
    if t.kind == "idx":
        return None
    if t.kind == "gaussian-ring":
        params = {"modes": t.modes, "radius": t.radius, "sigma": t.sigma}
    elif t.kind == "grid-mixture":
        params = {"side": t.modes, "spacing": t.spacing, "sigma": t.sigma}
    elif t.kind == "two-moons":
        params = {"radius": t.radius, "sigma": t.sigma}
    else:
        params = {"sigma": t.sigma}
    return make_target(t.kind, params)


def load_data(cfg: RunConfig) -> Tuple[Optional[SyntheticTarget], np.ndarray]:
    """Training data: draws from the synthetic target, or flattened IDX images."""
    target = build_target(cfg)
    if target is None:
        images = load_idx(cfg.target.idx_path, cfg.target.downscale)
        return None, images.reshape(len(images), -1)[: cfg.target.samples]
    return target, target.sample(cfg.target.samples, np.random.default_rng(cfg.run.seed))


def new_flow(cfg: RunConfig, dim: int) -> FlowModel:
    depth, width = cfg.flow.resolved()
    return FlowModel(dim, depth, width, seed=cfg.run.seed)


def new_energy(cfg: RunConfig, dim: int) -> EnergyModel:
    if cfg.energy.kind == "poly":
        return PolynomialEnergy(dim, degree=1)
    return MLPEnergy(dim, cfg.energy.hidden, seed=cfg.run.seed)


def train_flow_stage(cfg: RunConfig, data: np.ndarray) -> Tuple[FlowModel, FlowTrace]:
    flow = new_flow(cfg, data.shape[1])
    fc = FlowTrainConfig(
        iterations=cfg.flow.iterations, batch_size=cfg.flow.batch_size, lr=cfg.flow.lr, seed=cfg.run.seed
    )
    trace = train_flow_mle(flow, data, fc)
    return flow, trace


def hmc_config(cfg: RunConfig) -> HmcConfig:
    tr = cfg.trainer
    return HmcConfig(leapfrog_steps=tr.leapfrog_steps, mcmc_steps=tr.mcmc_steps, step_size=tr.step_size)


@dataclass
class EnergyResult:
    energy: EnergyModel
    extras: Dict[str, np.ndarray]
    trace: Dict[str, List[float]]


def train_energy_stage(cfg: RunConfig, flow: FlowModel, data: np.ndarray, method: Optional[str] = None) -> EnergyResult:
    """Fit the correction network with the NT (``"nt"``) or NCE (``"nce"``) trainer."""
    method = method or cfg.trainer.kind
    tr = cfg.trainer
    energy = new_energy(cfg, flow.dim)
    if method == "nt":
        ntc = NtTrainConfig(
            iterations=tr.iterations, lr=tr.lr, batch_size=tr.batch_size, hmc=hmc_config(cfg),
            clip_norm=tr.clip_norm, lr_schedule=tr.lr_schedule, seed=cfg.run.seed,
        )
        energy, trace, _ = nt_ebm_train(flow, energy, data, ntc)
        cols = {"iteration": list(range(1, len(trace.gap) + 1)), "gap": trace.gap, "acceptance": trace.acceptance,
                "step_size": trace.step_size, "grad_norm": trace.grad_norm}
        return EnergyResult(energy, {}, cols)
    if method == "nce":
        ncc = NceTrainConfig(
            iterations=tr.iterations, lr=tr.lr, batch_size=tr.batch_size, rho=tr.rho,
            clip_norm=tr.clip_norm, lr_schedule=tr.lr_schedule, seed=cfg.run.seed,
        )
        energy, bias, trace = nce_train(flow, energy, data, ncc)
        cols = {"iteration": list(range(1, len(trace.loss) + 1)), "loss": trace.loss, "bias": trace.bias}
        return EnergyResult(energy, {"bias": np.asarray(bias)}, cols)
    raise ValueError(f"unknown trainer {method!r}")


# ---------------------------------------------------------------------------
# sampling


@dataclass
class SampleResult:
    latent: ChainEnsemble
    data: ChainEnsemble
    sampler: str


def _pull_back(flow: FlowModel, x: np.ndarray) -> np.ndarray:
    return flow.inverse(x)[0].data


def sample_stage(cfg: RunConfig, flow: FlowModel, energy: EnergyModel, sampler: Optional[str] = None) -> SampleResult:
    """Run ``sampler.chains`` chains for ``sampler.steps`` steps and return both coordinate views.

    ``latent-hmc`` runs HMC on the pulled-back density; ``data-langevin`` and
    ``data-hmc`` run directly in data space, started from flow samples.
    """
    sampler = sampler or cfg.sampler.kind
    sc = cfg.sampler
    model = TiltedModel(flow, energy)
    chains = init_chains_from_prior(sc.chains, flow.dim, cfg.trainer.step_size, seed=cfg.run.seed + _SAMPLER_STREAM)
    if sampler == "latent-hmc":
        ens = run_chains(chains, model.latent_target, hmc_config(cfg), sc.steps, sc.record_every, sc.burn_in, space="z")
        return SampleResult(ens, ens.map_positions(flow.push, space="x"), sampler)
    for c in chains:
        c.z = flow.push(c.z[None])[0]
        c.invalidate()
    if sampler == "data-langevin":
        ens = run_langevin(chains, model.data_target, sc.langevin_step, sc.steps, sc.record_every, sc.burn_in)
    elif sampler == "data-hmc":
        ens = run_chains(chains, model.data_target, hmc_config(cfg), sc.steps, sc.record_every, sc.burn_in, space="x")
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    return SampleResult(ens.map_positions(lambda x: _pull_back(flow, x), space="z"), ens, sampler)


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class Diagnosis:
    space: str
    rhat: Optional[np.ndarray]
    mean_rhat: Optional[float]
    acf_lag: int
    acf_at_lag: float
    acf_lags: np.ndarray
    acf_mean: np.ndarray
    acf_min: np.ndarray
    acf_max: np.ndarray
    acceptance: float
    trapped_chains: int
    mode_entropy: Optional[float] = None
    modes_visited: Optional[int] = None
    chain_mode_entropy: Optional[float] = None
    notes: List[str] = field(default_factory=list)

    def passed(self, threshold: float) -> Optional[bool]:
        return None if self.mean_rhat is None else bool(self.mean_rhat < threshold)


def trapped_chain_count(ensemble: ChainEnsemble, ratio: float = 0.1) -> int:
    """Chains whose own variance (averaged over coordinates) is below ``ratio`` times the pooled variance."""
    post = ensemble.post_burn_in()
    pooled = post.positions.reshape(-1, post.dim).var(axis=0).mean()
    if pooled == 0:
        return post.num_chains
    own = post.positions.var(axis=1).mean(axis=1)
    return int(np.sum(own < ratio * pooled))


def diagnose(cfg: RunConfig, ensemble: ChainEnsemble, centers: Optional[np.ndarray] = None) -> Diagnosis:
    """Gelman-Rubin, autocorrelation and (for 2-D mixtures in x) mode coverage."""
    post = ensemble.post_burn_in()
    notes = []
    if post.num_records < 2:
        raise DiagnosticsError(f"ensemble too short: {post.num_records} records after burn-in")
    if ensemble.num_chains >= 2:
        gr = gelman_rubin(ensemble)
        rhat, mean_rhat = gr.rhat, gr.mean_rhat
    else:
        rhat, mean_rhat = None, None
        notes.append("R-hat refused: needs at least 2 chains")
    stride = post.stride
    max_lag = min(cfg.diagnose.max_lag // stride, post.num_records - 1)
    acf = autocorrelation(ensemble, max_lag, lags_in_steps=True)
    lag_rec = cfg.diagnose.acf_lag // stride
    if lag_rec <= max_lag:
        acf_at = mean_abs_autocorrelation(ensemble, lag_rec)
    else:
        acf_at = float("nan")
        notes.append(f"chains too short for lag {cfg.diagnose.acf_lag}")
    diag = Diagnosis(
        space=ensemble.space, rhat=rhat, mean_rhat=mean_rhat, acf_lag=cfg.diagnose.acf_lag, acf_at_lag=acf_at,
        acf_lags=acf.lags, acf_mean=acf.mean, acf_min=acf.min, acf_max=acf.max,
        acceptance=post.acceptance_rate(), trapped_chains=trapped_chain_count(ensemble), notes=notes,
    )
    if centers is not None and ensemble.space == "x" and ensemble.dim == centers.shape[1]:
        cov = mode_coverage(post.positions.reshape(-1, ensemble.dim), centers, cfg.diagnose.mode_radius)
        diag.mode_entropy = cov.entropy
        diag.modes_visited = cov.visited
        diag.chain_mode_entropy = float(per_chain_mode_entropy(ensemble, centers, cfg.diagnose.mode_radius).mean())
    return diag


def summary_text(cfg: RunConfig, diagnoses: Dict[str, Diagnosis]) -> str:
    thr = cfg.diagnose.rhat_threshold
    lines = [f"diagnostics summary (R-hat threshold {thr})"]
    for name, d in diagnoses.items():
        lines.append(f"[{name}] space={d.space}")
        if d.mean_rhat is None:
            lines.append("  R-hat: REFUSED")
        else:
            verdict = "PASS" if d.passed(thr) else "FAIL"
            per = " ".join(f"{v:.4f}" for v in d.rhat)
            lines.append(f"  mean R-hat {d.mean_rhat:.4f} ({per}) {verdict}")
        lines.append(f"  mean |autocorrelation| at lag {d.acf_lag}: {d.acf_at_lag:.4f}")
        lines.append(f"  acceptance rate {d.acceptance:.4f}; trapped chains {d.trapped_chains}")
        if d.mode_entropy is not None:
            lines.append(
                f"  modes visited {d.modes_visited}; pooled mode entropy {d.mode_entropy:.4f}; "
                f"mean per-chain mode entropy {d.chain_mode_entropy:.4f}"
            )
        for note in d.notes:
            lines.append(f"  note: {note}")
    return "\n".join(lines) + "\n"


def write_diagnosis(out: Path, name: str, d: Diagnosis) -> None:
    if d.rhat is not None:
        write_table(out / f"rhat_{name}.csv", {"coordinate": list(range(len(d.rhat))), "rhat": list(d.rhat)})
    write_table(out / f"autocorr_{name}.csv", {"lag": list(d.acf_lags), "mean": list(d.acf_mean),
                                               "min": list(d.acf_min), "max": list(d.acf_max)})


# ---------------------------------------------------------------------------
# interpolation


def interpolate_stage(
    cfg: RunConfig, flow: FlowModel, energy: EnergyModel, z1=None, z2=None, gamma: Optional[float] = None
) -> Tuple[MagnetizedPath, np.ndarray, np.ndarray]:
    """Magnetized Langevin path from ``z1`` towards ``z2`` (both drawn from N(0, I) when absent)."""
    rng = np.random.default_rng([cfg.run.seed, _INTERP_STREAM])
    draws = rng.standard_normal((2, flow.dim))
    z1 = draws[0] if z1 is None else np.asarray(z1, dtype=np.float64)
    z2 = draws[1] if z2 is None else np.asarray(z2, dtype=np.float64)
    ic = cfg.interpolate
    mc = MagnetizedConfig(gamma=ic.gamma if gamma is None else gamma, n_steps=ic.steps, dt=ic.dt, seed=cfg.run.seed)
    model = TiltedModel(flow, energy)
    return magnetized_path(z1, z2, model.latent_target, mc, push=flow.push), z1, z2


def path_columns(path: MagnetizedPath) -> Dict[str, list]:
    cols = {"step": list(range(len(path.energy)))}
    for k in range(path.z.shape[1]):
        cols[f"z{k}"] = list(path.z[:, k])
    for k in range(path.x.shape[1]):
        cols[f"x{k}"] = list(path.x[:, k])
    cols["log_density"] = list(path.energy)
    cols["distance"] = list(path.distance)
    return cols


# ---------------------------------------------------------------------------
# grid densities


# row order of grid_normalizers.csv; the ``density`` column indexes this tuple
GRID_DENSITY_NAMES = ("log_target", "log_flow", "log_tilted")


@dataclass
class GridDensities:
    points: np.ndarray
    cell_area: float
    log_target: np.ndarray
    log_flow: np.ndarray
    log_tilted: np.ndarray

    def normalizers(self) -> Dict[str, float]:
        return {name: grid_normalize(getattr(self, name), self.cell_area)[1] for name in GRID_DENSITY_NAMES}

    def kl_flow(self) -> float:
        return grid_kl(self.log_target, self.log_flow, self.cell_area)

    def kl_tilted(self) -> float:
        return grid_kl(self.log_target, self.log_tilted, self.cell_area)


def grid_densities(target: SyntheticTarget, flow: FlowModel, energy: EnergyModel, size: int = 200,
                   chunk: int = 8192) -> GridDensities:
    """Unnormalised log-densities of target, flow and tilted model on the [-6, 6]^2 grid."""
    pts, area, _ = grid_points(-6.0, 6.0, size)
    model = TiltedModel(flow, energy)
    log_q = flow.log_prob_np(pts, chunk)
    log_p = np.concatenate([model.log_p_x_unnorm(pts[i:i + chunk]).data for i in range(0, len(pts), chunk)])
    return GridDensities(pts, area, target.log_prob(pts), log_q, log_p)


def write_grids(out: Path, grids: GridDensities) -> None:
    write_table(out / "grid_density.csv", {
        "x0": list(grids.points[:, 0]), "x1": list(grids.points[:, 1]),
        "log_target": list(grids.log_target), "log_flow": list(grids.log_flow), "log_tilted": list(grids.log_tilted),
    })
    norms = grids.normalizers()
    kls = {"log_target": 0.0, "log_flow": grids.kl_flow(), "log_tilted": grids.kl_tilted()}
    names = GRID_DENSITY_NAMES
    write_table(out / "grid_normalizers.csv", {
        "density": list(range(len(names))),
        "log_normalizer": [norms[n] for n in names],
        "grid_kl_from_target": [kls[n] for n in names],
        "cell_area": [grids.cell_area] * len(names),
    })


def entropy_estimate(target: SyntheticTarget, count: int = 200_000, seed: int = 0) -> float:
    """Monte-Carlo differential entropy of a target: ``-mean log p`` over its own samples."""
    x = target.sample(count, np.random.default_rng(seed))
    return float(-np.mean(target.log_prob(x)))


def standard_normal_cross_entropy(data: np.ndarray) -> float:
    """``-mean log N(x; 0, I)``: the NLL of a flow that is the identity map."""
    d = data.shape[1]
    return float(0.5 * d * math.log(2 * math.pi) + 0.5 * np.mean(np.sum(data * data, axis=1)))
