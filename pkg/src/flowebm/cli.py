"""Command-line driver.

Subcommands: train-flow, train-ebm, train-nce, sample, diagnose,
interpolate and demo2d.  Exit status is 0 on success, 1 for usage,
configuration or input-file errors and 2 for numerical failures
(divergent training, non-finite sampler states).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import pipeline
from .config import SAMPLER_KINDS, ConfigError, RunConfig
from .datasets import IdxError, TargetError
from .diagnostics import DiagnosticsError
from .flow import FLOW_PRESETS, FlowModel
from .io import (
    ChainFormatError,
    CheckpointError,
    dump_chains,
    load_chains,
    load_checkpoint,
    save_checkpoint,
    write_table,
)

logger = logging.getLogger("flowebm")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2

CONFIG_ECHO = "config.ini"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message} (see {self.prog} --help)")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI run configuration (defaults are used for absent keys)")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--out", type=Path, help="output directory (overrides run.out)")
    p.add_argument("--size", choices=sorted(FLOW_PRESETS), help="flow size preset (overrides flow.size)")
    p.add_argument("--sampler", choices=SAMPLER_KINDS, help="sampler (overrides sampler.kind)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowebm", description="Flow-based EBMs sampled by latent-space HMC.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    helps = {
        "train-flow": "fit the flow by maximum likelihood",
        "train-ebm": "fit the correction network by latent-HMC maximum likelihood",
        "train-nce": "fit the correction network by noise-contrastive estimation",
        "sample": "run chains on the tilted model and dump them in z and x",
        "diagnose": "R-hat, autocorrelation and mode-coverage report for chain dumps",
        "interpolate": "magnetized Langevin path between two latent points",
        "demo2d": "end-to-end 2-D run emitting grid densities and trajectories",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        _common(p)
        if name == "diagnose":
            p.add_argument("chains", nargs="+", type=Path, help="chain CSV files")
        if name == "interpolate":
            p.add_argument("--z1", help="start point, comma separated")
            p.add_argument("--z2", help="anchor point, comma separated")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg.run.kind = args.command
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.out is not None:
        cfg.run.out = str(args.out)
    if args.size is not None:
        cfg.flow.size = args.size
    if args.sampler is not None:
        cfg.sampler.kind = args.sampler
    return cfg.validate()


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_ECHO).write_text(cfg.dumps())
    return out


def _path(out: Path, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else out / p


def _load_flow(cfg: RunConfig, out: Path) -> FlowModel:
    path = _path(out, cfg.flow.checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"flow checkpoint {path} not found; run train-flow first")
    model = load_checkpoint(path)
    if not isinstance(model, FlowModel):
        raise CheckpointError(f"{path} does not hold a flow")
    return model


def _load_energy(cfg: RunConfig, out: Path):
    path = _path(out, cfg.energy.checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"energy checkpoint {path} not found; run train-ebm or train-nce first")
    return load_checkpoint(path)


def _parse_point(text: Optional[str], dim: int) -> Optional[np.ndarray]:
    if text is None:
        return None
    try:
        vals = np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise UsageError(f"cannot parse point {text!r}") from None
    if vals.shape != (dim,):
        raise UsageError(f"point {text!r} must have {dim} coordinates")
    return vals


# ---------------------------------------------------------------------------
# commands


def cmd_train_flow(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    target, data = pipeline.load_data(cfg)
    flow, trace = pipeline.train_flow_stage(cfg, data)
    save_checkpoint(_path(out, cfg.flow.checkpoint), flow)
    write_table(out / "flow_trace.csv", {"iteration": list(range(1, len(trace.nll) + 1)), "nll": trace.nll})
    nll = float(-np.mean(flow.log_prob_np(data)))
    msg = f"flow depth {flow.depth} width {flow.width}: final NLL {nll:.4f}"
    if target is not None:
        msg += f" (target entropy {pipeline.entropy_estimate(target):.4f})"
    print(msg)
    return EXIT_OK


def cmd_train_energy(cfg: RunConfig, method: str) -> int:
    out = _out_dir(cfg)
    flow = _load_flow(cfg, out)
    _, data = pipeline.load_data(cfg)
    res = pipeline.train_energy_stage(cfg, flow, data, method)
    save_checkpoint(_path(out, cfg.energy.checkpoint), res.energy, res.extras)
    write_table(out / f"{'ebm' if method == 'nt' else 'nce'}_trace.csv", res.trace)
    if method == "nt":
        tail = res.trace["gap"][-max(len(res.trace["gap"]) // 10, 1):]
        print(f"NT training done: mean energy gap over last 10% {np.mean(tail):.4f}")
    else:
        tail = res.trace["loss"][-max(len(res.trace["loss"]) // 10, 1):]
        print(f"NCE training done: mean loss over last 10% {np.mean(tail):.4f} (chance level {np.log(2):.4f})")
    return EXIT_OK


def cmd_sample(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    flow = _load_flow(cfg, out)
    energy = _load_energy(cfg, out)
    res = pipeline.sample_stage(cfg, flow, energy)
    rows = dump_chains(out / "chains_z.csv", res.latent)
    dump_chains(out / "chains_x.csv", res.data)
    print(f"{res.sampler}: {cfg.sampler.chains} chains x {cfg.sampler.steps} steps, {rows} rows per dump, "
          f"acceptance {res.latent.post_burn_in().acceptance_rate():.3f}")
    return EXIT_OK


def cmd_diagnose(cfg: RunConfig, paths: List[Path]) -> int:
    out = _out_dir(cfg)
    target = pipeline.build_target(cfg)
    centers = target.centers if target is not None else None
    diagnoses = {}
    for path in paths:
        ens = load_chains(path, burn_in=cfg.sampler.burn_in)
        d = pipeline.diagnose(cfg, ens, centers)
        diagnoses[path.stem] = d
        pipeline.write_diagnosis(out, path.stem, d)
    text = pipeline.summary_text(cfg, diagnoses)
    (out / "summary.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_interpolate(cfg: RunConfig, z1: Optional[str], z2: Optional[str]) -> int:
    out = _out_dir(cfg)
    flow = _load_flow(cfg, out)
    energy = _load_energy(cfg, out)
    path, _, _ = pipeline.interpolate_stage(cfg, flow, energy, _parse_point(z1, flow.dim), _parse_point(z2, flow.dim))
    write_table(out / "interpolation.csv", pipeline.path_columns(path))
    band = path.energy_band
    verdict = "PASS" if band < cfg.interpolate.band_threshold else "FAIL"
    print(f"path of {cfg.interpolate.steps} steps: final distance to anchor {path.distance[-1]:.4f}, "
          f"log-density band {band:.4f} (threshold {cfg.interpolate.band_threshold}) {verdict}")
    return EXIT_OK


def cmd_demo2d(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    target, data = pipeline.load_data(cfg)
    if target is None or target.dim != 2:
        raise ConfigError("demo2d needs a 2-D synthetic target")
    flow, ftrace = pipeline.train_flow_stage(cfg, data)
    save_checkpoint(_path(out, cfg.flow.checkpoint), flow)
    write_table(out / "flow_trace.csv", {"iteration": list(range(1, len(ftrace.nll) + 1)), "nll": ftrace.nll})
    res = pipeline.train_energy_stage(cfg, flow, data)
    save_checkpoint(_path(out, cfg.energy.checkpoint), res.energy, res.extras)
    write_table(out / f"{'ebm' if cfg.trainer.kind == 'nt' else 'nce'}_trace.csv", res.trace)
    samples = pipeline.sample_stage(cfg, flow, res.energy)
    dump_chains(out / "chains_z.csv", samples.latent)
    dump_chains(out / "chains_x.csv", samples.data)
    diagnoses = {"chains_z": pipeline.diagnose(cfg, samples.latent, target.centers),
                 "chains_x": pipeline.diagnose(cfg, samples.data, target.centers)}
    for name, d in diagnoses.items():
        pipeline.write_diagnosis(out, name, d)
    grids = pipeline.grid_densities(target, flow, res.energy)
    pipeline.write_grids(out, grids)
    text = pipeline.summary_text(cfg, diagnoses)
    text += f"grid KL(target || flow) {grids.kl_flow():.4f}\ngrid KL(target || tilted) {grids.kl_tilted():.4f}\n"
    (out / "summary.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
        if args.command == "train-flow":
            return cmd_train_flow(cfg)
        if args.command in ("train-ebm", "train-nce"):
            return cmd_train_energy(cfg, "nt" if args.command == "train-ebm" else "nce")
        if args.command == "sample":
            return cmd_sample(cfg)
        if args.command == "diagnose":
            return cmd_diagnose(cfg, args.chains)
        if args.command == "interpolate":
            return cmd_interpolate(cfg, args.z1, args.z2)
        return cmd_demo2d(cfg)
    except FloatingPointError as err:
        print(f"flowebm: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, CheckpointError, ChainFormatError, DiagnosticsError,
            TargetError, IdxError, FileNotFoundError) as err:
        print(f"flowebm: error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
