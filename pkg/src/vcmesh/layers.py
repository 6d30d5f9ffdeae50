"""Spatially varying mesh convolution, density-weighted (un)pooling and residual layers.

All layers run on the dense ``(N, max E_i)`` neighborhood table of a
:class:`~vcmesh.sampling.SamplingMap`.  Vacant slots of the table carry
structurally-zero parameters that are masked out of training and of the
parameter count.

Inputs are ``(N_in, C)`` or batched ``(B, N_in, C)`` arrays/Tensors; the
output keeps the same batching.
"""

from __future__ import annotations

import logging

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigurationError, InputError
from .sampling import SamplingMap

logger = logging.getLogger(__name__)

BASIS_NORM_EPS = 1e-12


def _batched(x):
    x = ad.as_tensor(x)
    if x.ndim == 2:
        return ad.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise InputError(f"expected (N, C) or (B, N, C) features, got shape {x.shape}")
    return x, False


def _unbatched(y, squeeze):
    return ad.reshape(y, y.shape[1:]) if squeeze else y


class Layer:
    """Common plumbing: a sampling map, its dense table and ordered parameters."""

    kind = "layer"

    def __init__(self, smap: SamplingMap, in_channels: int, out_channels: int):
        self.map = smap
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.table, self.mask = smap.dense()
        self.sizes = smap.sizes

    def parameters(self) -> list[Parameter]:
        return []

    def registered_count(self) -> int:
        return sum(p.num_trainable for p in self.parameters())

    def _check_input(self, x: Tensor):
        if x.shape[-2] != self.map.in_vertices or x.shape[-1] != self.in_channels:
            raise InputError(
                f"{self.kind}: expected input (.., {self.map.in_vertices}, {self.in_channels}), "
                f"got {x.shape}"
            )

    def __call__(self, x):
        x, squeeze = _batched(x)
        self._check_input(x)
        return _unbatched(self.forward(x), squeeze)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError


class VcConv(Layer):
    """Convolution whose per-neighbor kernels mix a shared weight basis.

    ``W[i, j] = sum_k alpha[i, j, k] * B[k]`` and
    ``y_i = sum_j W[i, j]^T x[N(i)_j] + b``.
    """

    kind = "vcConv"

    def __init__(self, smap, in_channels, out_channels, basis_size, *, normalize_basis=False, rng=None):
        super().__init__(smap, in_channels, out_channels)
        if basis_size < 1:
            raise ConfigurationError(f"basis size must be >= 1, got {basis_size}")
        rng = np.random.default_rng() if rng is None else rng
        I, O, M = self.in_channels, self.out_channels, int(basis_size)
        self.basis_size = M
        self.normalize_basis = bool(normalize_basis)
        lim = np.sqrt(6.0 / (I * M + O * M))
        self.basis = Parameter(rng.uniform(-lim, lim, size=(M, I, O)), "basis")
        lim_a = np.sqrt(1.0 / (self.sizes * M))[:, None, None]
        alpha = rng.uniform(-1.0, 1.0, size=self.mask.shape + (M,)) * lim_a
        self.alpha = Parameter(alpha, "alpha", trainable=self.mask[:, :, None])
        self.bias = Parameter(np.zeros(O), "bias")

    def parameters(self):
        return [self.basis, self.alpha, self.bias]

    def effective_basis(self) -> Tensor:
        if not self.normalize_basis:
            return self.basis
        norm = ad.sqrt(ad.reduce_sum(self.basis * self.basis, axis=(1, 2), keepdims=True))
        return self.basis / ad.clip_min(norm, BASIS_NORM_EPS)

    def weights(self) -> np.ndarray:
        """Synthesized per-neighbor kernels, shape ``(N, max E, I, O)``."""
        return np.einsum("nkm,mio->nkio", self.alpha.data, self.effective_basis().data)

    def forward(self, x):
        b, n = x.shape[0], self.map.out_vertices
        m, i, o = self.basis_size, self.in_channels, self.out_channels
        xg = ad.gather(x, self.table, axis=1)  # (B, N, K, I)
        mixed = ad.matmul(ad.transpose(self.alpha, (0, 2, 1)), xg)  # (B, N, M, I)
        flat = ad.reshape(mixed, (b, n, m * i))
        return ad.matmul(flat, ad.reshape(self.effective_basis(), (m * i, o))) + self.bias


class VcTransConv(VcConv):
    """The same operator evaluated over an up map (coarse -> fine)."""

    kind = "vcTransConv"

    def __init__(self, smap, *args, **kwargs):
        if smap.direction != "up":
            raise ConfigurationError("vcTransConv needs an up-sampling map")
        super().__init__(smap, *args, **kwargs)


class LcConv(Layer):
    """Locally connected convolution: a free ``I x O`` matrix per neighbor slot."""

    kind = "LCConv"

    def __init__(self, smap, in_channels, out_channels, *, rng=None):
        super().__init__(smap, in_channels, out_channels)
        rng = np.random.default_rng() if rng is None else rng
        I, O = self.in_channels, self.out_channels
        lim = np.sqrt(6.0 / (I * self.sizes + O))[:, None, None, None]
        w = rng.uniform(-1.0, 1.0, size=self.mask.shape + (I, O)) * lim
        self.weight = Parameter(w, "weight", trainable=self.mask[:, :, None, None])
        self.bias = Parameter(np.zeros(O), "bias")

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        xg = ad.gather(x, self.table, axis=1)
        return ad.einsum("bnki,nkio->bno", xg, self.weight) + self.bias


class VdWeights:
    """Learned per-neighbor densities ``rho`` and their normalized form.

    ``rho'[i, j] = |rho[i, j]| / sum_j |rho[i, j]|``.  A row whose densities
    are all zero falls back to the uniform average (with a warning).
    """

    def __init__(self, smap: SamplingMap):
        self.map = smap
        self.table, self.mask = smap.dense()
        self.rho = Parameter(self.mask.astype(np.float64), "rho", trainable=self.mask)

    def normalized(self) -> Tensor:
        a = ad.absolute(self.rho)
        total = a.data.sum(axis=1, keepdims=True)
        dead = total == 0.0
        if dead.any():
            logger.warning("%d all-zero density rows reset to uniform averages", int(dead.sum()))
            a = a + self.mask * dead
        return a / ad.reduce_sum(a, axis=1, keepdims=True)

    def aggregate(self, x: Tensor) -> Tensor:
        # centered on the first neighbor: since rows of rho' sum to one this
        # equals sum_j rho'_j x_j, and constant signals come out bit-exact
        xg = ad.gather(x, self.table, axis=1)  # (B, N, K, C)
        ref = ad.gather(x, self.table[:, :1], axis=1)  # (B, N, 1, C)
        w = ad.reshape(self.normalized(), (self.map.out_vertices, 1, -1))
        y = ad.matmul(w, xg - ref) + ref  # (B, N, 1, C)
        return ad.reshape(y, (x.shape[0], self.map.out_vertices, x.shape[-1]))


class VdPool(Layer):
    """Density-weighted convex aggregation over a down map (channels preserved)."""

    kind = "vdPool"
    direction = "down"

    def __init__(self, smap, channels=None):
        if smap.direction != self.direction:
            raise ConfigurationError(f"{self.kind} needs a {self.direction}-sampling map")
        super().__init__(smap, channels or 0, channels or 0)
        self.vd = VdWeights(smap)

    def _check_input(self, x):
        if x.shape[-2] != self.map.in_vertices:
            raise InputError(f"{self.kind}: expected {self.map.in_vertices} input vertices, got {x.shape}")

    def parameters(self):
        return [self.vd.rho]

    def forward(self, x):
        return self.vd.aggregate(x)


class VdUnpool(VdPool):
    kind = "vdUnpool"
    direction = "up"


class VdRes(Layer):
    """Residual path: ``y_i = sum_j rho'[i, j] * C x[N(i)_j]``; ``C`` is the identity when I == O."""

    kind = "vdRes"

    def __init__(self, smap, in_channels, out_channels, *, rng=None):
        super().__init__(smap, in_channels, out_channels)
        rng = np.random.default_rng() if rng is None else rng
        self.vd = VdWeights(smap)
        self.channel_map = None
        if self.in_channels != self.out_channels:
            lim = np.sqrt(6.0 / (self.in_channels + self.out_channels))
            c = rng.uniform(-lim, lim, size=(self.out_channels, self.in_channels))
            self.channel_map = Parameter(c, "C")

    def parameters(self):
        return [self.vd.rho] + ([self.channel_map] if self.channel_map is not None else [])

    def forward(self, x):
        y = self.vd.aggregate(x)
        if self.channel_map is None:
            return y
        return ad.matmul(y, ad.transpose(self.channel_map))


class AvgPool(VdPool):
    """Plain mean over each neighborhood; no parameters."""

    kind = "avgPool"

    def __init__(self, smap, channels=None):
        Layer.__init__(self, smap, channels or 0, channels or 0)
        if smap.direction != self.direction:
            raise ConfigurationError(f"{self.kind} needs a {self.direction}-sampling map")
        self.weights = self.mask / self.sizes[:, None]

    def parameters(self):
        return []

    def forward(self, x):
        return ad.einsum("bnkc,nk->bnc", ad.gather(x, self.table, axis=1), self.weights)


class AvgUnpool(AvgPool):
    kind = "avgUnpool"
    direction = "up"


class MaxPool(AvgPool):
    """Per-channel max over each neighborhood; ties route to the lowest slot."""

    kind = "maxPool"

    def __init__(self, smap, channels=None):
        super().__init__(smap, channels)
        self.penalty = np.where(self.mask, 0.0, -np.inf)[None, :, :, None]

    def forward(self, x):
        return ad.reduce_max(ad.gather(x, self.table, axis=1) + self.penalty, axis=2)


class MaxUnpool(MaxPool):
    kind = "maxUnpool"
    direction = "up"


def param_count(layer) -> int:
    """Trainable scalar count from the closed-form expressions."""
    total_e = layer.map.total_size if hasattr(layer, "map") else 0
    if isinstance(layer, VcConv):
        I, O, M = layer.in_channels, layer.out_channels, layer.basis_size
        return I * O * M + M * total_e + O
    if isinstance(layer, LcConv):
        return layer.in_channels * layer.out_channels * total_e + layer.out_channels
    if isinstance(layer, VdRes):
        extra = 0 if layer.in_channels == layer.out_channels else layer.in_channels * layer.out_channels
        return total_e + extra
    if isinstance(layer, AvgPool):
        return 0
    if isinstance(layer, VdPool):
        return total_e
    if hasattr(layer, "layers"):
        return sum(param_count(sub) for sub in layer.layers())
    raise TypeError(f"no parameter formula for {type(layer).__name__}")


# functional aliases mirroring the operator names

def vc_conv_forward(layer: VcConv, x):
    return layer(x)


def vc_trans_conv_forward(layer: VcConv, x):
    if layer.map.direction != "up":
        raise ConfigurationError("transpose convolution needs an up-sampling map")
    return layer(x)


def lc_conv_forward(layer: LcConv, x):
    return layer(x)


def vd_pool_forward(layer: VdPool, x):
    if layer.map.direction != "down":
        raise ConfigurationError("vdPool needs a down-sampling map")
    return layer(x)


def vd_unpool_forward(layer: VdPool, x):
    if layer.map.direction != "up":
        raise ConfigurationError("vdUnpool needs an up-sampling map")
    return layer(x)


def vd_res_forward(layer: VdRes, x):
    return layer(x)
