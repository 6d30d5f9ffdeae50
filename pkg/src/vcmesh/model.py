"""Fully convolutional mesh autoencoder built from residual sampling blocks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigurationError, InputError
from .layers import (
    AvgPool, AvgUnpool, Layer, MaxPool, MaxUnpool, VcConv, VcTransConv, VdPool, VdRes, VdUnpool,
    param_count,
)
from .mesh import MeshTopology
from .sampling import SamplingHierarchy, build_down_map

logger = logging.getLogger(__name__)

BLOCK_TYPES = ("residual", "plain", "conv_pool")
POOL_TYPES = ("vd", "avg", "max")
_POOLS = {
    ("vd", "down"): VdPool, ("vd", "up"): VdUnpool,
    ("avg", "down"): AvgPool, ("avg", "up"): AvgUnpool,
    ("max", "down"): MaxPool, ("max", "up"): MaxUnpool,
}


class ResidualBlock:
    """Main path (conv, optional pooling) with Elu, plus an optional vd residual path.

    Default configuration is ``elu(vcConv(x)) + vdRes(x)`` over one map.  The
    ablation variants drop the residual (``plain``) or split the strided
    convolution into a stride-1 convolution and a pooling layer
    (``conv_pool``).
    """

    def __init__(self, main: Sequence[Layer], residual: VdRes | None = None, activation: bool = True):
        self.main = list(main)
        self.residual = residual
        self.activation = activation

    def layers(self) -> list[Layer]:
        return self.main + ([self.residual] if self.residual is not None else [])

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers() for p in layer.parameters()]

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for layer in self.main:
            h = layer(h)
            if self.activation and isinstance(layer, VcConv):
                h = ad.elu(h)
        if self.residual is not None:
            h = h + self.residual(x)
        return h

    @property
    def out_vertices(self) -> int:
        return self.main[-1].map.out_vertices


@dataclass
class LatentCode:
    values: np.ndarray
    fingerprint: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    def copy(self) -> "LatentCode":
        return LatentCode(self.values.copy(), self.fingerprint)


def _auto_m(smap) -> int:
    return max(1, int(np.floor(smap.sizes.mean() + 0.5)))


class AutoencoderModel:
    def __init__(self, hierarchy: SamplingHierarchy, channels: Sequence[int], m_plan="auto", *,
                 block: str = "residual", pool: str = "vd", normalize_basis: bool = False, seed: int = 0):
        depth = hierarchy.depth
        channels = [int(c) for c in channels]
        if len(channels) != 2 * depth + 1:
            raise ConfigurationError(
                f"channel plan needs 2 x depth + 1 = {2 * depth + 1} entries, got {len(channels)}"
            )
        if channels[0] != channels[-1]:
            raise ConfigurationError("channel plan must end with the input channel count")
        if block not in BLOCK_TYPES:
            raise ConfigurationError(f"block must be one of {BLOCK_TYPES}, got {block!r}")
        if pool not in POOL_TYPES:
            raise ConfigurationError(f"pool must be one of {POOL_TYPES}, got {pool!r}")
        if isinstance(m_plan, str):
            if m_plan != "auto":
                raise ConfigurationError(f"M plan must be 'auto' or a list, got {m_plan!r}")
            m_plan = ["auto"] * depth
        m_plan = list(m_plan)
        if len(m_plan) == depth:
            # one entry per level, shared by that level's down and up blocks
            m_plan = m_plan + m_plan[::-1]
        if len(m_plan) != 2 * depth:
            raise ConfigurationError(
                f"M plan needs one entry per level ({depth}) or per block ({2 * depth}), got {len(m_plan)}"
            )
        for m in m_plan:
            if m != "auto" and int(m) < 1:
                raise ConfigurationError(f"basis size must be >= 1, got {m}")

        self.hierarchy = hierarchy
        self.channels = channels
        self.block = block
        self.pool = pool
        self.normalize_basis = normalize_basis
        self.seed = seed
        self.fingerprint = hierarchy.fingerprint()
        rng = np.random.default_rng(seed)

        self.encoder: list[ResidualBlock] = []
        self.decoder: list[ResidualBlock] = []
        self.basis_sizes: list[int] = []
        for lvl in range(depth):
            cin, cout = channels[lvl], channels[lvl + 1]
            self.encoder.append(self._make_block(lvl, "down", cin, cout, m_plan[lvl], rng, True))
        for k, lvl in enumerate(reversed(range(depth))):
            cin, cout = channels[depth + k], channels[depth + k + 1]
            # linear output on the final decoder block
            self.decoder.append(self._make_block(lvl, "up", cin, cout, m_plan[depth + k], rng, lvl != 0))

    def _make_block(self, lvl, direction, cin, cout, m, rng, activation):
        level = self.hierarchy.levels[lvl]
        smap = level.down if direction == "down" else level.up
        if self.block == "conv_pool":
            # stride-1 convolution on the finer graph, paired with a pooling layer
            fine = self.hierarchy.topology(lvl)
            conv_map = build_down_map(fine, range(fine.num_vertices), 1, 1)
            mm = _auto_m(conv_map) if m == "auto" else int(m)
            self.basis_sizes.append(mm)
            pool = _POOLS[(self.pool, direction)](smap, cin if direction == "up" else cout)
            conv = VcConv(conv_map, cin, cout, mm, normalize_basis=self.normalize_basis, rng=rng)
            main = [conv, pool] if direction == "down" else [pool, conv]
            return ResidualBlock(main, None, activation)
        mm = _auto_m(smap) if m == "auto" else int(m)
        self.basis_sizes.append(mm)
        cls = VcConv if direction == "down" else VcTransConv
        conv = cls(smap, cin, cout, mm, normalize_basis=self.normalize_basis, rng=rng)
        res = VdRes(smap, cin, cout, rng=rng) if self.block == "residual" else None
        return ResidualBlock([conv], res, activation)

    # -- structure -------------------------------------------------------------

    @property
    def blocks(self) -> list[ResidualBlock]:
        return self.encoder + self.decoder

    def layers(self) -> list[Layer]:
        return [layer for b in self.blocks for layer in b.layers()]

    def parameters(self) -> list[Parameter]:
        return [p for b in self.blocks for p in b.parameters()]

    def param_count(self) -> int:
        return sum(param_count(layer) for layer in self.layers())

    @property
    def latent_shape(self) -> tuple[int, int]:
        return self.hierarchy.vertex_counts()[-1], self.channels[self.hierarchy.depth]

    # -- evaluation ------------------------------------------------------------

    def encode_tensor(self, x) -> Tensor:
        h = ad.as_tensor(x)
        for block in self.encoder:
            h = block(h)
        return h

    def decode_tensor(self, z) -> Tensor:
        h = ad.as_tensor(z)
        for block in self.decoder:
            h = block(h)
        return h

    def __call__(self, x) -> Tensor:
        return self.decode_tensor(self.encode_tensor(x))

    def _check_features(self, x):
        n, c = self.hierarchy.base.num_vertices, self.channels[0]
        if x.shape[-2:] != (n, c):
            raise InputError(f"expected features (.., {n}, {c}), got {x.shape}")

    def encode(self, x) -> LatentCode:
        x = np.asarray(getattr(x, "values", x), dtype=np.float64)
        self._check_features(x)
        return LatentCode(self.encode_tensor(x).data, self.fingerprint)

    def decode(self, code: LatentCode) -> np.ndarray:
        if code.fingerprint != self.fingerprint:
            raise InputError("latent code was produced for a different sampling hierarchy")
        if code.values.shape[-2:] != self.latent_shape:
            raise InputError(f"latent code shape {code.values.shape} != {self.latent_shape}")
        return self.decode_tensor(code.values).data

    def reconstruct(self, x) -> np.ndarray:
        x = np.asarray(getattr(x, "values", x), dtype=np.float64)
        self._check_features(x)
        return self(x).data


def build_autoencoder(hierarchy, channels, m_plan="auto", **kwargs) -> AutoencoderModel:
    return AutoencoderModel(hierarchy, channels, m_plan, **kwargs)


# -- losses ----------------------------------------------------------------------

def loss_l1(pred, target) -> Tensor:
    """Mean absolute error over every vertex, channel (and batch sample)."""
    pred, target = ad.as_tensor(pred), ad.as_tensor(target)
    if pred.shape != target.shape:
        raise InputError(f"loss_l1: shapes {pred.shape} and {target.shape} differ")
    return ad.reduce_mean(ad.absolute(pred - target))


class UniformLaplacian:
    """``Lx_i = x_i - mean_{j in adj(i)} x_j``; isolated vertices map to ``x_i``."""

    def __init__(self, topology: MeshTopology):
        self.topology = topology
        self.table, mask = topology.neighbor_table()
        deg = topology.degrees()
        self.weights = mask / np.maximum(deg, 1)[:, None]

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        avg = ad.einsum("bnkc,nk->bnc", ad.gather(x, self.table, axis=1), self.weights) if x.ndim == 3 \
            else ad.einsum("nkc,nk->nc", ad.gather(x, self.table, axis=0), self.weights)
        return x - avg


def loss_laplacian(pred, target, topology) -> Tensor:
    pred, target = ad.as_tensor(pred), ad.as_tensor(target)
    if pred.shape != target.shape:
        raise InputError(f"loss_laplacian: shapes {pred.shape} and {target.shape} differ")
    lap = topology if isinstance(topology, UniformLaplacian) else UniformLaplacian(topology)
    return ad.reduce_mean(ad.absolute(lap(pred - target)))


# -- latent manipulation -------------------------------------------------------

def _rows(code: LatentCode, subset) -> np.ndarray:
    rows = np.asarray(sorted({int(v) for v in subset}), dtype=np.int64)
    n = code.values.shape[-2]
    if rows.size and (rows.min() < 0 or rows.max() >= n):
        raise InputError(f"latent vertex subset {rows.tolist()} outside [0, {n})")
    return rows


def _same_space(a: LatentCode, b: LatentCode):
    if a.fingerprint != b.fingerprint:
        raise InputError("latent codes come from different sampling hierarchies")
    if a.values.shape != b.values.shape:
        raise InputError(f"latent code shapes {a.values.shape} and {b.values.shape} differ")


def interpolate_latent(source: LatentCode, target: LatentCode, subset, t: float) -> LatentCode:
    """Blend ``subset`` rows towards ``target``; other rows stay at ``source``."""
    _same_space(source, target)
    rows = _rows(source, subset)
    out = source.values.copy()
    out[..., rows, :] = (1.0 - t) * source.values[..., rows, :] + t * target.values[..., rows, :]
    return LatentCode(out, source.fingerprint)


def mix_latent(base: LatentCode, donor: LatentCode, subset) -> LatentCode:
    _same_space(base, donor)
    rows = _rows(base, subset)
    out = base.values.copy()
    out[..., rows, :] = donor.values[..., rows, :]
    return LatentCode(out, base.fingerprint)


# -- optimization ----------------------------------------------------------------

class Adam:
    """Adam with bias correction; moments live in lists aligned with ``params``."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        ad.zero_grad(self.params)

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if p.trainable is not None:
                p.data[~p.trainable] = 0.0


def adam_step(params, state: Adam, lr: float):
    state.step(lr)


def lr_schedule(epoch: int, lr0: float = 1e-4, decay: float = 0.9) -> float:
    return lr0 * decay**epoch


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-4
    decay: float = 0.9
    epochs: int = 200
    max_steps: int | None = None
    l1_weight: float = 1.0
    laplacian_weight: float = 0.0
    seed: int = 0


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_l1: float
    val_l1: float | None = None

    def tsv(self) -> str:
        cols = [str(self.epoch), repr(self.lr), repr(self.train_l1)]
        if self.val_l1 is not None:
            cols.append(repr(self.val_l1))
        return "\t".join(cols)


@dataclass
class TrainLog:
    step_losses: list[float] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)

    def tsv(self) -> str:
        return "".join(rec.tsv() + "\n" for rec in self.epochs)


class Trainer:
    """Mini-batch Adam training with exact, resumable iteration state."""

    def __init__(self, model: AutoencoderModel, config: TrainConfig):
        self.model = model
        self.config = config
        self.optimizer = Adam(model.parameters())
        self.rng = np.random.default_rng(config.seed)
        self.step = 0
        self.epoch = 0
        self.position = 0
        self.order: np.ndarray | None = None
        self.epoch_losses: list[float] = []
        self.laplacian = UniformLaplacian(model.hierarchy.base)

    @property
    def lr(self) -> float:
        return lr_schedule(self.epoch, self.config.lr, self.config.decay)

    def loss(self, pred, target) -> Tensor:
        cfg = self.config
        total = ad.scale(loss_l1(pred, target), cfg.l1_weight)
        if cfg.laplacian_weight:
            total = total + ad.scale(loss_laplacian(pred, target, self.laplacian), cfg.laplacian_weight)
        return total

    def train_step(self, batch: np.ndarray) -> float:
        self.optimizer.zero_grad()
        loss = self.loss(self.model(batch), batch)
        ad.backward(loss)
        self.optimizer.step(self.lr)
        self.step += 1
        return float(loss.data)

    def fit(self, train: np.ndarray, val: np.ndarray | None = None, steps: int | None = None,
            log: TrainLog | None = None, on_epoch=None) -> TrainLog:
        """Run until ``steps`` more steps, ``max_steps`` total or ``epochs`` finish."""
        train = np.asarray(train, dtype=np.float64)
        self.model._check_features(train)
        if len(train) == 0:
            raise InputError("training set is empty")
        log = TrainLog() if log is None else log
        cfg = self.config
        target = self.step + steps if steps is not None else cfg.max_steps
        while self.epoch < cfg.epochs and (target is None or self.step < target):
            if self.position == 0:
                self.order = self.rng.permutation(len(train))
                self.epoch_losses = []
            idx = self.order[self.position: self.position + cfg.batch_size]
            lr = self.lr
            loss = self.train_step(train[idx])
            log.step_losses.append(loss)
            self.epoch_losses.append(loss)
            self.position += len(idx)
            if self.position >= len(train):
                val_l1 = evaluate_l1(self.model, val) if val is not None and len(val) else None
                rec = EpochRecord(self.epoch, lr, float(np.mean(self.epoch_losses)), val_l1)
                log.epochs.append(rec)
                logger.info("epoch %d lr %.3g train %.6f", rec.epoch, rec.lr, rec.train_l1)
                self.epoch += 1
                self.position = 0
                if on_epoch is not None:
                    on_epoch(self)
        return log


def evaluate_l1(model: AutoencoderModel, data: np.ndarray, batch_size: int = 16) -> float:
    """Mean L1 reconstruction error over ``data`` (no gradient tracking needed)."""
    data = np.asarray(data, dtype=np.float64)
    total = 0.0
    for start in range(0, len(data), batch_size):
        chunk = data[start: start + batch_size]
        total += float(np.abs(model(chunk).data - chunk).sum())
    return total / data.size


def train(model: AutoencoderModel, dataset, config: TrainConfig, checkpoint=None):
    """Train on the dataset's ``train`` split; returns ``(log, trainer)``.

    ``checkpoint`` (a path) receives the final state, and the state after
    every epoch when given.
    """
    from .checkpoint import save_checkpoint

    if dataset.topology != model.hierarchy.base:
        raise InputError("dataset topology does not match the model's base mesh")
    trainer = Trainer(model, config)
    on_epoch = (lambda tr: save_checkpoint(checkpoint, tr)) if checkpoint else None
    log = trainer.fit(dataset.subset("train"), dataset.subset("val"), on_epoch=on_epoch)
    if checkpoint:
        save_checkpoint(checkpoint, trainer)
    return log, trainer
