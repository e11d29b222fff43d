"""Central finite-difference check of autograd gradients with respect to parameters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class CoordResult:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        denom = max(abs(self.analytic), abs(self.numeric), GRAD_FLOOR)
        return abs(self.analytic - self.numeric) / denom


# gradients smaller than this are compared in absolute terms
GRAD_FLOOR = 1e-6


def sample_coordinates(named_params, n_coords: int, rng: np.random.Generator):
    """One coordinate from every parameter tensor, topped up uniformly to ``n_coords``.

    Every coordinate is taken when the module has fewer than ``n_coords``.
    """
    named_params = [(n, p) for n, p in named_params if p.requires_grad]
    sizes = np.array([p.numel() for _, p in named_params])
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    first = starts + np.array([rng.integers(s) for s in sizes], dtype=np.int64)
    rest = np.setdiff1d(np.arange(sizes.sum()), first)
    extra = rng.choice(rest, size=min(len(rest), max(0, n_coords - len(first))), replace=False)
    picks = []
    for g in np.sort(np.concatenate([first, extra])):
        k = int(np.searchsorted(starts, g, side="right") - 1)
        name, p = named_params[k]
        picks.append((name, p, np.unravel_index(int(g - starts[k]), p.shape)))
    return picks


def check_gradients(loss_fn, module: torch.nn.Module, n_coords: int = 200, seed: int = 0, h: float = 1e-5):
    """Compare ``d loss_fn() / d param`` from autograd with central differences.

    ``module`` must already be float64. Returns one ``CoordResult`` per sampled coordinate.
    """
    params = list(module.named_parameters())
    for _, p in params:
        if p.dtype != torch.float64:
            raise TypeError("gradient checks need float64 parameters")
    module.zero_grad()
    loss = loss_fn()
    loss.backward()
    rng = np.random.default_rng(seed)
    results = []
    with torch.no_grad():
        for name, p, idx in sample_coordinates(params, n_coords, rng):
            analytic = float(p.grad[idx]) if p.grad is not None else 0.0
            orig = float(p[idx])
            p[idx] = orig + h
            up = float(loss_fn())
            p[idx] = orig - h
            down = float(loss_fn())
            p[idx] = orig
            results.append(CoordResult(name, tuple(int(i) for i in idx), analytic, (up - down) / (2 * h)))
    return results


def worst(results) -> CoordResult:
    return max(results, key=lambda r: r.rel_error)
