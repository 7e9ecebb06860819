from __future__ import annotations

import numpy as np
import pytest

from emomoe.core import RngStream, Tensor, backward


@pytest.fixture
def rng() -> RngStream:
    return RngStream(1234)


def finite_difference(fn, params: list[Tensor], h: float = 1e-4) -> list[np.ndarray]:
    """Central finite differences of a scalar-tensor function of ``params``."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def check_gradients(fn, params: list[Tensor], rel_tol: float = 1e-3,
                    h: float = 1e-4, min_probes: int = 20,
                    probe_rng: RngStream | None = None) -> None:
    """Compare autodiff grads to central differences on random probes.

    Checks every coordinate when the parameter is small, otherwise at least
    ``min_probes`` randomly chosen coordinates per parameter.
    """
    for p in params:
        p.grad = None
    loss = fn()
    backward(loss)
    probe_rng = probe_rng or RngStream(77)
    for p in params:
        assert p.grad is not None, f"no grad reached {p.name}"
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        if flat.size <= min_probes:
            idxs = np.arange(flat.size)
        else:
            idxs = probe_rng.choice(flat.size, size=min_probes, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            fd = (up - down) / (2 * h)
            ad = gflat[i]
            denom = max(abs(fd), abs(ad), 1e-6)
            assert abs(fd - ad) / denom < rel_tol, (
                f"grad mismatch for {p.name}[{i}]: fd={fd:.6g} ad={ad:.6g}"
            )
