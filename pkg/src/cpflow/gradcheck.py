"""Central finite-difference checks of the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import network
from .kernels import cross_pixel_loss, loss_gradients

STEP = 1e-5
LOSS_TOL = 1e-4
CHAIN_TOL = 1e-3
# relative-error denominator floor; keeps FD round-off on near-zero gradients from dominating
REL_FLOOR = 1e-6

LOSS_SHAPES = ((2, 3), (5, 3), (8, 3), (2, 16), (5, 16), (8, 16))


def rel_error(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)


@dataclass
class CheckResult:
    block_errors: dict[str, float]
    tol: float

    @property
    def max_error(self) -> float:
        return max(self.block_errors.values())

    @property
    def failing(self) -> list[str]:
        return [k for k, v in self.block_errors.items() if not v <= self.tol]

    @property
    def ok(self) -> bool:
        return not self.failing


def loss_level_check(seed: int, n: int, D: int, corrupt: str | None = None) -> CheckResult:
    rng = np.random.default_rng(seed)
    flows = rng.uniform(-1.0, 1.0, size=(n, 2))
    emb = rng.standard_normal((n, D))
    rho = float(rng.uniform(-1.5, 0.0))
    g = loss_gradients(flows, emb, rho)
    d_emb, d_rho = g.d_embeddings.copy(), g.d_rho
    if corrupt == "embeddings":
        d_emb *= 1.5
    elif corrupt == "rho":
        d_rho = d_rho * 1.5 + 1e-3

    num = np.zeros_like(emb)
    for idx in np.ndindex(emb.shape):
        e = emb.copy()
        e[idx] += STEP
        up = cross_pixel_loss(flows, e, rho)
        e[idx] -= 2 * STEP
        num[idx] = (up - cross_pixel_loss(flows, e, rho)) / (2 * STEP)
    num_rho = (cross_pixel_loss(flows, emb, rho + STEP) - cross_pixel_loss(flows, emb, rho - STEP)) / (2 * STEP)
    return CheckResult(
        {"embeddings": float(rel_error(d_emb, num).max()), "rho": float(rel_error(d_rho, num_rho))},
        LOSS_TOL,
    )


def loss_level_suite(seeds: int = 10, first_seed: int = 0, corrupt: str | None = None) -> CheckResult:
    """Worst per-block error over ``seeds`` instances cycling through LOSS_SHAPES."""
    worst: dict[str, float] = {}
    for k in range(seeds):
        n, D = LOSS_SHAPES[k % len(LOSS_SHAPES)]
        res = loss_level_check(first_seed + k, n, D, corrupt)
        for name, err in res.block_errors.items():
            worst[name] = max(worst.get(name, 0.0), err)
    return CheckResult(worst, LOSS_TOL)


def _chain_loss(image, coords, flows, params) -> float:
    emb = network.forward(image, coords, params).embeddings
    return cross_pixel_loss(flows, emb, float(params["kernel.rho"][0]))


def full_chain_check(seed: int, probes: int = 10, corrupt: str | None = None, size: int = 16, n_s: int = 4) -> CheckResult:
    """Backbone + hypercolumn + head + loss against finite differences on a
    random probe set of scalar parameters."""
    rng = np.random.default_rng(seed)
    params = network.init_params(seed)
    # nonzero biases so no probe sits exactly on a ReLU kink
    for name in params:
        if name.endswith(".b") or name.startswith("head.b"):
            params[name] = rng.uniform(-0.1, 0.1, size=params[name].shape)
    image = rng.uniform(0.0, 1.0, size=(size, size, 3))
    coords = network.sample_pixels(size, size, n_s, rng.integers(2**32)).coords
    flows = rng.uniform(-1.0, 1.0, size=(n_s, 2))

    fp = network.forward(image, coords, params)
    lg = loss_gradients(flows, fp.embeddings, float(params["kernel.rho"][0]))
    grads = network.network_backward(image, coords, params, lg.d_embeddings, fp)
    grads["kernel.rho"] = np.array([lg.d_rho])
    if corrupt is not None:
        grads[corrupt] = grads[corrupt] * 1.5 + 1e-3

    # probe set: one entry from every tensor first, then uniform over the rest
    names = list(params)
    picks = [(name, int(rng.integers(params[name].size))) for name in names[:probes]]
    sizes = np.array([params[n].size for n in names], dtype=float)
    while len(picks) < probes:
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        picks.append((name, int(rng.integers(params[name].size))))
    if corrupt is not None and corrupt not in {n for n, _ in picks}:
        picks[-1] = (corrupt, 0)

    errors: dict[str, float] = {}
    for name, k in picks:
        p = {n: a.copy() for n, a in params.items()}
        p[name].flat[k] += STEP
        up = _chain_loss(image, coords, flows, p)
        p[name].flat[k] -= 2 * STEP
        num = (up - _chain_loss(image, coords, flows, p)) / (2 * STEP)
        err = float(rel_error(grads[name].flat[k], num))
        errors[name] = max(errors.get(name, 0.0), err)
    return CheckResult(errors, CHAIN_TOL)
