"""Synthetic 2-D targets and IDX image ingestion."""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
_MAX_IDX_ITEMS = 1 << 34


class TargetError(ValueError):
    pass


class IdxError(ValueError):
    pass


@dataclass
class SyntheticTarget:
    """Isotropic Gaussian mixture with an exact density and sampler.

    Two-moons is represented as a dense mixture along the two arcs, which
    keeps the log-density exact for the represented distribution.
    """

    kind: str
    centers: np.ndarray
    weights: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.scales = np.broadcast_to(np.asarray(self.scales, dtype=np.float64), self.weights.shape).copy()
        k = len(self.centers)
        if k == 0:
            raise TargetError("mixture needs at least one component")
        if self.weights.shape != (k,):
            raise TargetError("one weight per component required")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise TargetError("weights must be non-negative and sum to 1")
        if np.any(self.scales <= 0):
            raise TargetError("component scales must be positive")

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def component_sigma(self) -> float:
        return float(self.scales.max())

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        d = self.dim
        sq = ((x[:, None, :] - self.centers[None, :, :]) ** 2).sum(-1)
        comp = (
            np.log(self.weights)[None, :]
            - 0.5 * sq / self.scales[None, :] ** 2
            - d * np.log(self.scales)[None, :]
            - 0.5 * d * math.log(2 * math.pi)
        )
        with np.errstate(divide="ignore"):
            return logsumexp(comp, axis=1)

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=count, p=self.weights)
        noise = rng.standard_normal((count, self.dim))
        return self.centers[comp] + self.scales[comp, None] * noise

    def mean(self) -> np.ndarray:
        return self.weights @ self.centers

    def covariance(self) -> np.ndarray:
        mu = self.mean()
        d = self.dim
        cov = np.zeros((d, d))
        for w, c, s in zip(self.weights, self.centers, self.scales):
            diff = c - mu
            cov += w * (np.outer(diff, diff) + s * s * np.eye(d))
        return cov

    def nearest_mode(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.argmin(((x[:, None, :] - self.centers[None]) ** 2).sum(-1), axis=1)


def make_target(kind: str = "gaussian-ring", params: Optional[Dict] = None, rng=None) -> SyntheticTarget:
    """Build a synthetic target.

    kinds and their params (defaults in brackets):

    * ``gaussian-ring``: ``modes`` [8], ``radius`` [4.0], ``sigma`` [0.3]
    * ``grid-mixture``: ``side`` [5], ``spacing`` [2.0], ``sigma`` [0.2]
    * ``two-moons``: ``points`` [64] per arc, ``radius`` [2.0], ``sigma`` [0.2]
    * ``gaussian``: ``mean`` [(0, 0)], ``sigma`` [1.0]

    ``rng`` is accepted for interface symmetry; all kinds are deterministic.
    """
    p = dict(params or {})

    def take(name, default):
        return p.pop(name, default)

    if kind == "gaussian-ring":
        modes = int(take("modes", 8))
        radius = float(take("radius", 4.0))
        sigma = float(take("sigma", 0.3))
        if modes < 1 or radius < 0 or sigma <= 0:
            raise TargetError("ring needs modes >= 1, radius >= 0, sigma > 0")
        ang = 2 * np.pi * np.arange(modes) / modes
        centers = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        target = SyntheticTarget(kind, centers, np.full(modes, 1.0 / modes), sigma)
    elif kind == "grid-mixture":
        side = int(take("side", 5))
        spacing = float(take("spacing", 2.0))
        sigma = float(take("sigma", 0.2))
        if side < 1 or spacing <= 0 or sigma <= 0:
            raise TargetError("grid needs side >= 1, spacing > 0, sigma > 0")
        ticks = (np.arange(side) - (side - 1) / 2) * spacing
        gx, gy = np.meshgrid(ticks, ticks, indexing="ij")
        centers = np.stack([gx.ravel(), gy.ravel()], axis=1)
        target = SyntheticTarget(kind, centers, np.full(len(centers), 1.0 / len(centers)), sigma)
    elif kind == "two-moons":
        n = int(take("points", 64))
        r = float(take("radius", 2.0))
        sigma = float(take("sigma", 0.2))
        if n < 1 or r <= 0 or sigma <= 0:
            raise TargetError("two-moons needs points >= 1, radius > 0, sigma > 0")
        t = np.linspace(0, np.pi, n)
        upper = np.stack([r * np.cos(t) - r / 2, r * np.sin(t) - r / 4], axis=1)
        lower = np.stack([r / 2 - r * np.cos(t), r / 4 - r * np.sin(t)], axis=1)
        centers = np.concatenate([upper, lower])
        target = SyntheticTarget(kind, centers, np.full(2 * n, 1.0 / (2 * n)), sigma)
    elif kind == "gaussian":
        mean = np.atleast_1d(np.asarray(take("mean", (0.0, 0.0)), dtype=np.float64))
        sigma = float(take("sigma", 1.0))
        if sigma <= 0:
            raise TargetError("sigma must be positive")
        target = SyntheticTarget(kind, mean[None, :], np.ones(1), sigma)
    else:
        raise TargetError(f"unknown target kind {kind!r}")
    if p:
        raise TargetError(f"unknown parameters for {kind}: {sorted(p)}")
    return target


# ---------------------------------------------------------------------------
# IDX


def _open(path: Union[str, Path]) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def parse_idx(raw: bytes, expected_magic: Optional[int] = None) -> np.ndarray:
    """Parse an unsigned-byte IDX payload into a uint8 array of its declared shape."""
    if len(raw) < 4:
        raise IdxError("file shorter than the magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != 0x08:
        raise IdxError(f"bad magic 0x{magic:08x} (only unsigned-byte IDX is supported)")
    if expected_magic is not None and magic != expected_magic:
        raise IdxError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    rank = magic & 0xFF
    if rank == 0:
        raise IdxError("IDX rank 0")
    header = 4 + 4 * rank
    if len(raw) < header:
        raise IdxError("truncated dimension header")
    dims = struct.unpack(">" + "I" * rank, raw[4:header])
    count = 1
    for n in dims:
        count *= n
        if count > _MAX_IDX_ITEMS:
            raise IdxError(f"dimension overflow: {dims}")
    if len(raw) - header < count:
        raise IdxError(f"truncated payload: need {count} bytes, have {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def block_downscale(images: np.ndarray, factor: int) -> np.ndarray:
    """Average non-overlapping ``factor x factor`` blocks; trailing rows/cols are dropped."""
    if factor == 1:
        return images
    n, h, w = images.shape[:3]
    h2, w2 = h // factor, w // factor
    trimmed = images[:, : h2 * factor, : w2 * factor]
    return trimmed.reshape(n, h2, factor, w2, factor, *images.shape[3:]).mean(axis=(2, 4))


def load_idx(path, downscale: int = 1) -> np.ndarray:
    """Load an IDX image file as float64 in [-1, 1], shape (n, rows, cols)."""
    raw = parse_idx(_open(path), IDX_IMAGE_MAGIC)
    images = raw.astype(np.float64) / 127.5 - 1.0
    return block_downscale(images, int(downscale))


def load_idx_labels(path) -> np.ndarray:
    return parse_idx(_open(path), IDX_LABEL_MAGIC).astype(np.int64)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (image magic for rank 3, label magic for rank 1)."""
    a = np.asarray(array, dtype=np.uint8)
    magic = 0x0800 | a.ndim
    Path(path).write_bytes(struct.pack(">I", magic) + struct.pack(">" + "I" * a.ndim, *a.shape) + a.tobytes())
