"""Finite-difference gradient verification of every layer and a composed model."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .layers import (
    AvgPool, AvgUnpool, LcConv, MaxPool, MaxUnpool, VcConv, VcTransConv, VdPool, VdRes, VdUnpool,
)
from .model import build_autoencoder, loss_l1, loss_laplacian
from .sampling import build_down_map, build_hierarchy, build_level
from .synthetic import random_graph

TOLERANCE = 1e-4
EPSILON = 1e-6


def _weighted_sum(out, weights):
    return ad.reduce_sum(out * weights)


def _layer_case(layer, in_vertices, channels, rng, batch=2):
    x = Parameter(rng.normal(size=(batch, in_vertices, channels)), "x")
    for p in layer.parameters():
        # move densities and biases away from their symmetric initial values
        p.data[...] = np.where(p.trainable if p.trainable is not None else True,
                               p.data + 0.3 * rng.normal(size=p.shape), 0.0)
    probe = layer(x.data)
    weights = rng.normal(size=probe.shape)
    return (lambda: _weighted_sum(layer(x), weights)), [x] + layer.parameters()


def gradient_suite(scale: str = "small", seed: int = 0, epsilon: float = EPSILON):
    """Yield ``(name, max relative error)`` for every differentiable component."""
    rng = np.random.default_rng(seed)
    n = 12 if scale == "small" else 30
    ch_in, ch_out = (2, 3) if scale == "small" else (3, 4)
    topo = random_graph(n, rng, extra_edges=n // 2)
    level = build_level(topo, stride=2, radius=1, seed=seed)
    down, up = level.down, level.up
    same = build_down_map(topo, range(n), 1, 1)
    n_coarse = down.out_vertices

    cases = {
        "vcConv": (lambda: VcConv(down, ch_in, ch_out, 3, rng=rng), n, ch_in),
        "vcConv(normalized basis)": (lambda: VcConv(down, ch_in, ch_out, 3, normalize_basis=True, rng=rng), n, ch_in),
        "vcConv(stride 1)": (lambda: VcConv(same, ch_in, ch_out, 2, rng=rng), n, ch_in),
        "vcTransConv": (lambda: VcTransConv(up, ch_in, ch_out, 3, rng=rng), n_coarse, ch_in),
        "LCConv": (lambda: LcConv(down, ch_in, ch_out, rng=rng), n, ch_in),
        "vdPool": (lambda: VdPool(down), n, ch_in),
        "vdUnpool": (lambda: VdUnpool(up), n_coarse, ch_in),
        "vdDownRes(I!=O)": (lambda: VdRes(down, ch_in, ch_out, rng=rng), n, ch_in),
        "vdUpRes(I=O)": (lambda: VdRes(up, ch_in, ch_in, rng=rng), n_coarse, ch_in),
        "avgPool": (lambda: AvgPool(down), n, ch_in),
        "maxPool": (lambda: MaxPool(down), n, ch_in),
        "avgUnpool": (lambda: AvgUnpool(up), n_coarse, ch_in),
        "maxUnpool": (lambda: MaxUnpool(up), n_coarse, ch_in),
    }
    for name, (make, n_in, c_in) in cases.items():
        fn, params = _layer_case(make(), n_in, c_in, rng)
        yield name, ad.grad_check(fn, params, epsilon)

    x = Parameter(rng.normal(size=(2, n, ch_in)), "x")
    w = rng.normal(size=x.shape)
    yield "elu", ad.grad_check(lambda: _weighted_sum(ad.elu(x), w), [x], epsilon)
    target = rng.normal(size=x.shape)
    yield "loss_l1", ad.grad_check(lambda: loss_l1(x, target), [x], epsilon)
    yield "loss_laplacian", ad.grad_check(lambda: loss_laplacian(x, target, topo), [x], epsilon)

    # kept at <= 200 trainable scalars so every one of them is probed
    hier = build_hierarchy(random_graph(16, rng, extra_edges=6), [(2, 1), (2, 1)], seed=seed)
    model = build_autoencoder(hier, (2, 2, 2, 2, 2), [1, 1], seed=seed)
    for p in model.parameters():
        if p.name in ("rho", "bias"):
            p.data[...] = np.where(p.trainable if p.trainable is not None else True,
                                   p.data + 0.3 * rng.normal(size=p.shape), 0.0)
    data = rng.normal(size=(2, 16, 2))
    yield f"autoencoder(depth 2, {model.param_count()} params)", ad.grad_check(lambda: loss_l1(model(data), data), model.parameters(), epsilon)


def run_gradient_suite(scale="small", seed=0, tolerance=TOLERANCE):
    results = list(gradient_suite(scale, seed))
    return results, all(err < tolerance for _, err in results)
