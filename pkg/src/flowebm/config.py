"""Run configuration: a sectioned INI file with a documented default for every key.

Unknown sections or keys are rejected instead of ignored, so a typo cannot
silently fall back to a default.  ``RunConfig.dumps`` writes the fully
resolved configuration; loading that text reproduces the run.

Schema (section, key, default)::

    [run]      kind = demo2d        seed = 0          out = runs/demo2d
    [target]   kind = gaussian-ring modes = 8         radius = 4.0
               sigma = 0.3          spacing = 2.5     samples = 20000
               idx_path =           downscale = 1
    [flow]     size = small         depth = 0 (0: take from size)
               width = 0 (0: take from size)
               iterations = 3000    batch_size = 256  lr = 0.002
               checkpoint = flow.ckpt
    [energy]   kind = mlp           hidden = 128,128,128
               checkpoint = energy.ckpt
    [trainer]  kind = nt            iterations = 1000 lr = 0.002
               batch_size = 64      mcmc_steps = 20   leapfrog_steps = 3
               step_size = 0.15     clip_norm = 100.0 lr_schedule = constant
               rho = 0.5
    [sampler]  kind = latent-hmc    chains = 64       steps = 2000
               burn_in = 400        record_every = 1  langevin_step = 0.05
    [diagnose] rhat_threshold = 1.2 acf_lag = 200     max_lag = 400
               mode_radius = 0.9
    [interpolate] gamma = 40.0      steps = 1000      dt = 0.0005
               band_threshold = 6.0

Flow size presets: ``small`` (depth 4, width 128), ``medium`` (8, 128),
``large`` (16, 256) and ``desk`` (6, 64).
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Tuple

from .flow import FLOW_PRESETS

RUN_KINDS = ("train-flow", "train-ebm", "train-nce", "sample", "diagnose", "interpolate", "demo2d")
SAMPLER_KINDS = ("latent-hmc", "data-langevin", "data-hmc")
TARGET_KINDS = ("gaussian-ring", "grid-mixture", "two-moons", "gaussian", "idx")


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    kind: str = "demo2d"
    seed: int = 0
    out: str = "runs/demo2d"


@dataclass
class TargetSection:
    kind: str = "gaussian-ring"
    modes: int = 8
    radius: float = 4.0
    sigma: float = 0.3
    spacing: float = 2.5
    samples: int = 20000
    idx_path: str = ""
    downscale: int = 1


@dataclass
class FlowSection:
    size: str = "small"
    depth: int = 0
    width: int = 0
    iterations: int = 3000
    batch_size: int = 256
    lr: float = 2e-3
    checkpoint: str = "flow.ckpt"

    def resolved(self) -> Tuple[int, int]:
        depth, width = FLOW_PRESETS[self.size]
        return (self.depth or depth, self.width or width)


@dataclass
class EnergySection:
    kind: str = "mlp"
    hidden: Tuple[int, ...] = (128, 128, 128)
    checkpoint: str = "energy.ckpt"


@dataclass
class TrainerSection:
    kind: str = "nt"
    iterations: int = 1000
    lr: float = 2e-3
    batch_size: int = 64
    mcmc_steps: int = 20
    leapfrog_steps: int = 3
    step_size: float = 0.15
    clip_norm: float = 100.0
    lr_schedule: str = "constant"
    rho: float = 0.5


@dataclass
class SamplerSection:
    kind: str = "latent-hmc"
    chains: int = 64
    steps: int = 2000
    burn_in: int = 400
    record_every: int = 1
    langevin_step: float = 0.05


@dataclass
class DiagnoseSection:
    rhat_threshold: float = 1.2
    acf_lag: int = 200
    max_lag: int = 400
    mode_radius: float = 0.9


@dataclass
class InterpolateSection:
    gamma: float = 40.0
    steps: int = 1000
    dt: float = 5e-4
    band_threshold: float = 6.0


SECTIONS = {
    "run": RunSection,
    "target": TargetSection,
    "flow": FlowSection,
    "energy": EnergySection,
    "trainer": TrainerSection,
    "sampler": SamplerSection,
    "diagnose": DiagnoseSection,
    "interpolate": InterpolateSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    target: TargetSection = field(default_factory=TargetSection)
    flow: FlowSection = field(default_factory=FlowSection)
    energy: EnergySection = field(default_factory=EnergySection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    diagnose: DiagnoseSection = field(default_factory=DiagnoseSection)
    interpolate: InterpolateSection = field(default_factory=InterpolateSection)

    def validate(self) -> "RunConfig":
        checks = [
            (self.run.kind in RUN_KINDS, f"run.kind must be one of {RUN_KINDS}"),
            (self.target.kind in TARGET_KINDS, f"target.kind must be one of {TARGET_KINDS}"),
            (self.flow.size in FLOW_PRESETS, f"flow.size must be one of {sorted(FLOW_PRESETS)}"),
            (self.sampler.kind in SAMPLER_KINDS, f"sampler.kind must be one of {SAMPLER_KINDS}"),
            (self.trainer.kind in ("nt", "nce"), "trainer.kind must be nt or nce"),
            (self.trainer.lr_schedule in ("constant", "linear"), "trainer.lr_schedule must be constant or linear"),
            (self.energy.kind in ("mlp", "poly"), "energy.kind must be mlp or poly"),
            (self.flow.depth >= 0 and self.flow.width >= 0, "flow depth/width must be >= 0"),
            (self.sampler.chains >= 1 and self.sampler.steps >= 1, "sampler.chains and sampler.steps must be >= 1"),
            (0 <= self.sampler.burn_in < self.sampler.steps, "sampler.burn_in must lie in [0, steps)"),
            (self.sampler.record_every >= 1, "sampler.record_every must be >= 1"),
            (self.target.samples >= 1, "target.samples must be >= 1"),
            (self.target.kind != "idx" or bool(self.target.idx_path), "target.idx_path is required for idx data"),
            (0 < self.trainer.rho < 1, "trainer.rho must lie in (0, 1)"),
            (self.interpolate.gamma >= 0 and self.interpolate.dt > 0, "interpolate needs gamma >= 0 and dt > 0"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as err:
            raise ConfigError(f"malformed config: {err}") from None
        cfg = cls()
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            target = getattr(cfg, section)
            known = {f.name: f for f in fields(target)}
            for key, raw in parser.items(section):
                if key not in known:
                    raise ConfigError(f"unknown key {section}.{key}")
                setattr(target, key, _parse_value(section, key, raw, getattr(target, key)))
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
        return cls.loads(text)

    def dumps(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for name in SECTIONS:
            section = getattr(self, name)
            parser[name] = {f.name: _format_value(getattr(section, f.name)) for f in fields(section)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def to_dict(self) -> Dict[str, Dict]:
        return {name: {f.name: getattr(getattr(self, name), f.name) for f in fields(getattr(self, name))} for name in SECTIONS}


def _parse_value(section: str, key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)
