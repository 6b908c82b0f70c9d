"""Flow backbone: actnorm, reverse permutation and affine coupling layers.

The model maps latent ``z ~ N(0, I)`` to data ``x = g(z)``.  Every layer
implements both directions; ``to_latent`` is the normalising direction used
for density evaluation and ``to_data`` the generative one used for sampling
and for the latent-space sampler.  Each direction returns the log absolute
Jacobian determinant of the map it applies.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)

# (depth, width) presets; "desk" is the default for 2-D experiments.
FLOW_PRESETS: Dict[str, Tuple[int, int]] = {
    "small": (4, 128),
    "medium": (8, 128),
    "large": (16, 256),
    "desk": (6, 64),
}


class TrainingDivergence(FloatingPointError):
    """Raised when a loss or gradient turns non-finite during training."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def std_normal_log_prob(z: Tensor) -> Tensor:
    d = z.shape[-1]
    return ad.scale(ad.square_norm(z), -0.5) - 0.5 * d * LOG_2PI


class ActNorm:
    """Per-coordinate affine map ``x = z * exp(log_scale) + bias``."""

    def __init__(self, dim: int):
        self.log_scale = Tensor(np.zeros(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self.initialized = False

    def parameters(self) -> List[Tuple[str, Tensor]]:
        return [("log_scale", self.log_scale), ("bias", self.bias)]

    def data_init(self, x: np.ndarray) -> np.ndarray:
        """Set parameters so that ``x`` leaves the layer (towards z) standardised."""
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        sd = np.where(sd > 1e-12, sd, 1.0)
        self.bias.data[...] = mu
        self.log_scale.data[...] = np.log(sd)
        self.initialized = True
        return (x - mu) / sd

    def to_latent(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        z = ad.mul(ad.sub(x, self.bias), ad.exp(ad.neg(self.log_scale)))
        return z, ad.neg(ad.sum(self.log_scale))

    def to_data(self, z: Tensor) -> Tuple[Tensor, Tensor]:
        x = ad.add(ad.mul(z, ad.exp(self.log_scale)), self.bias)
        return x, ad.sum(self.log_scale)


class ReversePermutation:
    def __init__(self, dim: int):
        self.index = np.arange(dim)[::-1].copy()

    def parameters(self) -> List[Tuple[str, Tensor]]:
        return []

    def to_latent(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        return ad.take(x, self.index), ad.as_tensor(0.0)

    def to_data(self, z: Tensor) -> Tuple[Tensor, Tensor]:
        return ad.take(z, self.index), ad.as_tensor(0.0)


class AffineCoupling:
    """``x = z * exp(s) + t`` on the unmasked coordinates.

    ``s`` and ``t`` come from a two-hidden-layer tanh perceptron applied to
    the masked (pass-through) coordinates.  ``s = tanh(raw)`` so each layer
    scales by a factor in ``(1/e, e)``.
    """

    def __init__(self, dim: int, width: int, mask: np.ndarray, rng: np.random.Generator):
        self.mask = np.asarray(mask, dtype=np.float64)
        self.free = 1.0 - self.mask
        self.w1 = Tensor(xavier(rng, dim, width), requires_grad=True)
        self.b1 = Tensor(np.zeros(width), requires_grad=True)
        self.w2 = Tensor(xavier(rng, width, width), requires_grad=True)
        self.b2 = Tensor(np.zeros(width), requires_grad=True)
        # zero heads: the layer starts as the identity
        self.ws = Tensor(np.zeros((width, dim)), requires_grad=True)
        self.bs = Tensor(np.zeros(dim), requires_grad=True)
        self.wt = Tensor(np.zeros((width, dim)), requires_grad=True)
        self.bt = Tensor(np.zeros(dim), requires_grad=True)

    def parameters(self) -> List[Tuple[str, Tensor]]:
        names = ("w1", "b1", "w2", "b2", "ws", "bs", "wt", "bt")
        return [(n, getattr(self, n)) for n in names]

    def _scale_shift(self, u: Tensor) -> Tuple[Tensor, Tensor]:
        h = ad.tanh(ad.affine(ad.mul(u, self.mask), self.w1, self.b1))
        h = ad.tanh(ad.affine(h, self.w2, self.b2))
        s = ad.mul(ad.tanh(ad.affine(h, self.ws, self.bs)), self.free)
        t = ad.mul(ad.affine(h, self.wt, self.bt), self.free)
        return s, t

    def to_data(self, z: Tensor) -> Tuple[Tensor, Tensor]:
        s, t = self._scale_shift(z)
        return ad.add(ad.mul(z, ad.exp(s)), t), ad.sum(s, axis=1)

    def to_latent(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        # masked coordinates pass through unchanged, so s and t are recomputable from x
        s, t = self._scale_shift(x)
        return ad.mul(ad.sub(x, t), ad.exp(ad.neg(s))), ad.neg(ad.sum(s, axis=1))


class FlowModel:
    """Invertible ``x = g(z)`` with a standard-normal prior on ``z``.

    ``depth`` flow steps, each (in the normalising direction) an actnorm, a
    reverse permutation and a coupling whose mask passes the even positions.
    The permutation makes consecutive couplings transform alternating halves
    of the original coordinates.
    """

    def __init__(self, dim: int, depth: int = 6, width: int = 64, seed: int = 0):
        if dim < 1 or depth < 0 or width < 1:
            raise ValueError("dim >= 1, depth >= 0, width >= 1 required")
        self.dim = dim
        self.depth = depth
        self.width = width
        self.seed = seed
        rng = np.random.default_rng(seed)
        mask = (np.arange(dim) % 2 == 0).astype(np.float64)
        if dim == 1:
            # nothing to condition on; the coupling degenerates to a learned affine shift/scale
            mask = np.zeros(1)
        self.layers: List = []
        for _ in range(depth):
            self.layers.append(ActNorm(dim))
            self.layers.append(ReversePermutation(dim))
            self.layers.append(AffineCoupling(dim, width, mask, rng))

    @classmethod
    def from_preset(cls, dim: int, size: str, seed: int = 0) -> "FlowModel":
        depth, width = FLOW_PRESETS[size]
        return cls(dim, depth, width, seed)

    def config(self) -> Dict[str, int]:
        return {"dim": self.dim, "depth": self.depth, "width": self.width, "seed": self.seed}

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            for name, p in layer.parameters():
                out.append((f"layer{i}.{type(layer).__name__.lower()}.{name}", p))
        return out

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    @property
    def initialized(self) -> bool:
        return all(l.initialized for l in self.layers if isinstance(l, ActNorm))

    def data_init(self, x: np.ndarray) -> None:
        """Data-dependent actnorm initialisation on a batch (normalising pass)."""
        h = Tensor(np.asarray(x, dtype=np.float64))
        for layer in self.layers:
            if isinstance(layer, ActNorm):
                h = Tensor(layer.data_init(h.data))
            else:
                h, _ = layer.to_latent(h)

    def mark_initialized(self) -> None:
        for l in self.layers:
            if isinstance(l, ActNorm):
                l.initialized = True

    # -- the two directions --------------------------------------------------

    def forward(self, z) -> Tuple[Tensor, Tensor]:
        """``x = g(z)`` and ``log|det dg/dz|`` per row."""
        h = ad.as_tensor(z)
        _check_batch(h, self.dim)
        logdet = ad.as_tensor(np.zeros(h.shape[0]))
        for layer in reversed(self.layers):
            h, ld = layer.to_data(h)
            logdet = ad.add(logdet, ld)
        return h, logdet

    def inverse(self, x) -> Tuple[Tensor, Tensor]:
        """``z = g^{-1}(x)`` and ``log|det dg^{-1}/dx|`` per row."""
        h = ad.as_tensor(x)
        _check_batch(h, self.dim)
        logdet = ad.as_tensor(np.zeros(h.shape[0]))
        for layer in self.layers:
            h, ld = layer.to_latent(h)
            logdet = ad.add(logdet, ld)
        if not h.is_finite() or not logdet.is_finite():
            raise FloatingPointError("non-finite value in flow inverse (exploded scales?)")
        return h, logdet

    def log_prob(self, x) -> Tensor:
        z, logdet = self.inverse(x)
        return ad.add(std_normal_log_prob(z), logdet)

    def sample(self, count: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        if count < 1:
            raise ValueError("count must be >= 1")
        z = rng.standard_normal((count, self.dim))
        x, _ = self.forward(z)
        return z, x.data

    def push(self, z: np.ndarray) -> np.ndarray:
        """Numeric ``g(z)`` for a batch, without recording."""
        return self.forward(np.asarray(z, dtype=np.float64))[0].data

    def log_prob_np(self, x: np.ndarray, chunk: int = 8192) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.concatenate([self.log_prob(x[i : i + chunk]).data for i in range(0, len(x), chunk)])


def _check_batch(t: Tensor, dim: int) -> None:
    if t.ndim != 2 or t.shape[1] != dim:
        raise ad.ShapeError(f"expected a batch of shape (n, {dim}), got {t.shape}")


@dataclass
class FlowTrainConfig:
    iterations: int = 5000
    batch_size: int = 256
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.99, 0.999)
    seed: int = 0
    init_batch: int = 1024
    log_every: int = 500


@dataclass
class FlowTrace:
    nll: List[float] = field(default_factory=list)

    def smoothed(self, window: int = 50) -> np.ndarray:
        a = np.asarray(self.nll)
        if len(a) < window:
            return a.copy()
        kernel = np.ones(window) / window
        return np.convolve(a, kernel, mode="valid")


def train_flow_mle(model: FlowModel, data: np.ndarray, config: Optional[FlowTrainConfig] = None) -> FlowTrace:
    """Fit the flow by maximum likelihood (minibatch Adam on mean NLL)."""
    config = config or FlowTrainConfig()
    data = np.asarray(data, dtype=np.float64)
    if len(data) == 0:
        raise ValueError("empty dataset")
    if data.ndim != 2 or data.shape[1] != model.dim:
        raise ad.ShapeError(f"data shape {data.shape} does not match flow dim {model.dim}")
    rng = np.random.default_rng(config.seed)
    if not model.initialized and model.depth > 0:
        init = data[rng.choice(len(data), size=min(config.init_batch, len(data)), replace=False)]
        model.data_init(init)
    params = model.parameters()
    opt = ad.Adam(params, lr=config.lr, betas=config.betas) if params else None
    trace = FlowTrace()
    for it in range(config.iterations):
        batch = data[rng.integers(0, len(data), size=config.batch_size)]
        with ad.Tape() as tape:
            loss = ad.neg(ad.mean(model.log_prob(batch)))
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergence("non-finite flow NLL", it)
        trace.nll.append(value)
        if opt is None:
            continue
        grads = tape.gradient(loss, params)
        if not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingDivergence("non-finite flow gradient", it)
        opt.step(grads)
        if config.log_every and (it + 1) % config.log_every == 0:
            logger.info("flow iter %d nll %.4f", it + 1, float(np.mean(trace.nll[-config.log_every :])))
    return trace
