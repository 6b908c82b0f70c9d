"""Shared numeric oracles for the test-suite."""

import numpy as np

FD_STEP = 1e-6


def central_fd(fn, x, h=FD_STEP):
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(x)
        flat[i] = orig - h
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_err(analytic, numeric, floor=1e-3):
    """Max elementwise error relative to max(|numeric|, floor).

    The floor keeps near-zero components from dominating, since the
    finite-difference truncation error there is absolute, not relative.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(n), floor)))


def numeric_jacobian(fn, x, h=1e-6):
    """Jacobian of a vector function R^d -> R^d by central differences."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((fn(x + e) - fn(x - e)) / (2 * h))
    return np.stack(cols, axis=1)


def perturbed_flow(dim, depth=3, width=16, seed=0, scale=0.3):
    """A flow whose parameters are all randomised, so no layer is the identity."""
    from flowebm.flow import FlowModel

    flow = FlowModel(dim, depth, width, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    for _, p in flow.named_parameters():
        p.data[...] = p.data + scale * rng.standard_normal(p.shape)
    flow.mark_initialized()
    return flow
