"""Correction networks ``f(x)`` and the tilted densities they induce.

``TiltedModel`` pairs a frozen flow with an energy network and exposes the
unnormalised log-densities

* data space:    ``f(x) + log q_flow(x)``
* latent space:  ``f(g(z)) + log N(z; 0, I)``

The latent form needs neither the flow inverse nor its Jacobian, which is
what makes sampling in ``z`` cheap.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .flow import FlowModel, std_normal_log_prob, xavier

Target = Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]


class EnergyModel:
    """Base class: scalar network, one real per input row."""

    kind = "energy"

    def __call__(self, x) -> Tensor:
        raise NotImplementedError

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        raise NotImplementedError

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def config(self) -> Dict:
        raise NotImplementedError

    def value(self, x: np.ndarray) -> np.ndarray:
        return self(np.asarray(x, dtype=np.float64)).data


class MLPEnergy(EnergyModel):
    """Perceptron with LipSwish hidden activations (default 3 x 128)."""

    kind = "mlp"

    def __init__(self, dim: int, hidden: Sequence[int] = (128, 128, 128), seed: int = 0, zero_output: bool = False):
        self.dim = dim
        self.hidden = tuple(int(h) for h in hidden)
        self.seed = seed
        rng = np.random.default_rng(seed)
        sizes = (dim,) + self.hidden + (1,)
        self.weights: List[Tensor] = []
        self.biases: List[Tensor] = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            w = np.zeros((a, b)) if (last and zero_output) else xavier(rng, a, b)
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(np.zeros(b), requires_grad=True))

    def named_parameters(self):
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out += [(f"dense{i}.w", w), (f"dense{i}.b", b)]
        return out

    def config(self):
        return {"kind": self.kind, "dim": self.dim, "hidden": list(self.hidden), "seed": self.seed}

    def __call__(self, x) -> Tensor:
        h = ad.as_tensor(x)
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.affine(h, w, b)
            if i < n - 1:
                h = ad.lipswish(h)
        return ad.reshape(h, (h.shape[0],))


class PolynomialEnergy(EnergyModel):
    """``f(x) = sum_k w_k . x**k`` for k = 1..degree (exponential-family probe)."""

    kind = "poly"

    def __init__(self, dim: int, degree: int = 1, weight: Optional[np.ndarray] = None):
        if degree < 1:
            raise ValueError("degree must be >= 1")
        self.dim = dim
        self.degree = degree
        w = np.zeros(dim * degree) if weight is None else np.asarray(weight, dtype=np.float64).reshape(-1)
        if w.shape != (dim * degree,):
            raise ad.ShapeError(f"weight must have {dim * degree} entries")
        self.weight = Tensor(w.copy(), requires_grad=True)

    def named_parameters(self):
        return [("weight", self.weight)]

    def config(self):
        return {"kind": self.kind, "dim": self.dim, "degree": self.degree}

    def features(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.concatenate([x**k for k in range(1, self.degree + 1)], axis=1)

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        feats = x
        if self.degree > 1:
            powers = [x]
            for _ in range(self.degree - 1):
                powers.append(ad.mul(powers[-1], x))
            feats = _hconcat(powers)
        return ad.reshape(ad.matmul(feats, ad.reshape(self.weight, (-1, 1))), (x.shape[0],))


def _hconcat(parts: List[Tensor]) -> Tensor:
    # concat via zero-padded gathers, keeps the op set small
    widths = [p.shape[1] for p in parts]
    total = sum(widths)
    out = None
    offset = 0
    for p, w in zip(parts, widths):
        idx = np.full(total, -1)
        idx[offset : offset + w] = np.arange(w)
        piece = ad.take(p, idx, pad=True)
        out = piece if out is None else ad.add(out, piece)
        offset += w
    return out


def _conv_index(h: int, w: int, c: int, k: int, stride: int, pad: int) -> Tuple[np.ndarray, int, int]:
    """im2col gather index for a channel-last (h, w, c) flattened image.

    Returns an index of shape (out_h * out_w, k * k * c) with -1 for padding.
    """
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    rows = np.arange(oh)[:, None] * stride - pad + np.arange(k)[None, :]  # (oh, k)
    cols = np.arange(ow)[:, None] * stride - pad + np.arange(k)[None, :]  # (ow, k)
    r = rows[:, None, :, None, None]
    q = cols[None, :, None, :, None]
    ch = np.arange(c)[None, None, None, None, :]
    valid = (r >= 0) & (r < h) & (q >= 0) & (q < w)
    flat = (r * w + q) * c + ch
    idx = np.where(valid, flat, -1)
    idx = np.broadcast_to(idx, (oh, ow, k, k, c))
    return idx.reshape(oh * ow, k * k * c), oh, ow


class ConvEnergy(EnergyModel):
    """Reduced strided conv stack for small images.

    3x3 conv(nf) stride 1, 4x4 conv(2nf) stride 2, 4x4 conv(4nf) stride 2,
    all LipSwish, then a dense read-out.  Inputs are flattened channel-last
    images.  Convolutions are gathers followed by matrix products.
    """

    kind = "conv"

    def __init__(self, height: int, width: int, channels: int = 1, nf: int = 32, seed: int = 0):
        self.height, self.width, self.channels, self.nf, self.seed = height, width, channels, nf, seed
        self.dim = height * width * channels
        rng = np.random.default_rng(seed)
        specs = [(3, 1, 1, nf), (4, 2, 1, 2 * nf), (4, 2, 1, 4 * nf)]
        h, w, c = height, width, channels
        self.layers = []
        for k, stride, pad, cout in specs:
            idx, oh, ow = _conv_index(h, w, c, k, stride, pad)
            kern = Tensor(xavier(rng, k * k * c, cout), requires_grad=True)
            bias = Tensor(np.zeros(cout), requires_grad=True)
            self.layers.append((idx, kern, bias, oh * ow * cout))
            h, w, c = oh, ow, cout
        self.out_w = Tensor(xavier(rng, h * w * c, 1), requires_grad=True)
        self.out_b = Tensor(np.zeros(1), requires_grad=True)

    def named_parameters(self):
        out = []
        for i, (_, k, b, _) in enumerate(self.layers):
            out += [(f"conv{i}.w", k), (f"conv{i}.b", b)]
        return out + [("out.w", self.out_w), ("out.b", self.out_b)]

    def config(self):
        return {"kind": self.kind, "height": self.height, "width": self.width,
                "channels": self.channels, "nf": self.nf, "seed": self.seed}

    def __call__(self, x) -> Tensor:
        h = ad.as_tensor(x)
        n = h.shape[0]
        for idx, kern, bias, flat in self.layers:
            patches = ad.take(h, idx, pad=True)  # (n, positions, k*k*c)
            p = ad.reshape(patches, (n * idx.shape[0], idx.shape[1]))
            h = ad.reshape(ad.lipswish(ad.affine(p, kern, bias)), (n, flat))
        return ad.reshape(ad.affine(h, self.out_w, self.out_b), (n,))


def build_energy(config: Dict) -> EnergyModel:
    cfg = dict(config)
    kind = cfg.pop("kind")
    if kind == "mlp":
        return MLPEnergy(cfg["dim"], cfg.get("hidden", (128, 128, 128)), cfg.get("seed", 0))
    if kind == "poly":
        return PolynomialEnergy(cfg["dim"], cfg.get("degree", 1))
    if kind == "conv":
        return ConvEnergy(cfg["height"], cfg["width"], cfg.get("channels", 1), cfg.get("nf", 32), cfg.get("seed", 0))
    raise ValueError(f"unknown energy kind {kind!r}")


class TiltedModel:
    """Exponential tilt of a frozen flow by an energy network."""

    def __init__(self, flow: FlowModel, energy: EnergyModel):
        self.flow = flow
        self.energy = energy

    def log_p_z_unnorm(self, z) -> Tensor:
        z = ad.as_tensor(z)
        x, _ = self.flow.forward(z)
        out = ad.add(self.energy(x), std_normal_log_prob(z))
        if not out.is_finite():
            raise FloatingPointError("non-finite latent log-density")
        return out

    def log_p_x_unnorm(self, x) -> Tensor:
        x = ad.as_tensor(x)
        out = ad.add(self.energy(x), self.flow.log_prob(x))
        if not out.is_finite():
            raise FloatingPointError("non-finite data log-density")
        return out

    def grad_z_log_p(self, z: np.ndarray) -> np.ndarray:
        return self.latent_target(z)[1]

    def latent_target(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Log-density and its z-gradient for a batch of latent positions."""
        return _value_and_grad_rows(self.log_p_z_unnorm, z)

    def data_target(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Log-density and its x-gradient in data space (inverse flow + log-det)."""
        return _value_and_grad_rows(self.log_p_x_unnorm, x)

    def negative_energy(self, z: np.ndarray) -> np.ndarray:
        return self.log_p_z_unnorm(np.asarray(z, dtype=np.float64)).data


def _value_and_grad_rows(fn: Callable[[Tensor], Tensor], pts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    leaf = Tensor(np.asarray(pts, dtype=np.float64), requires_grad=True)
    with ad.Tape() as tape:
        vals = fn(leaf)
        root = ad.sum(vals)
    (g,) = tape.gradient(root, [leaf])
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient of log-density")
    return vals.data, g
