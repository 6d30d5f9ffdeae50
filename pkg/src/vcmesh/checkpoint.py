"""Binary checkpoints: model structure, parameters, Adam moments and iteration state.

Layout (little-endian)::

    magic "VCMCKPT\\0" | u32 version | u64 hierarchy fingerprint
    u32 len | JSON header (sorted keys): channel plan, M plan, block options,
              train config, step/epoch/position, batch order, RNG state
    u32 len | serialized sampling hierarchy
    per parameter, in declared order: values, then Adam first and second moments

Each parameter record is ``u32 name length | name | u32 ndim | u32 shape... |
u8 masked``; masked parameters then store ``u32 rows | u32 row offsets`` and
only their trainable entries, unmasked ones store all entries, as float64.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict

import numpy as np

from .errors import InputError
from .model import AutoencoderModel, TrainConfig, Trainer
from .sampling import deserialize_hierarchy, hierarchy_fingerprint

MAGIC = b"VCMCKPT\x00"
VERSION = 1


def _write_block(buf, payload: bytes):
    buf.write(struct.pack("<I", len(payload)))
    buf.write(payload)


def _write_values(buf, param, values):
    if param.trainable is None:
        buf.write(np.ascontiguousarray(values, dtype="<f8").tobytes())
        return
    rows = param.trainable.reshape(param.shape[0], -1).sum(axis=1)
    offsets = np.concatenate([[0], np.cumsum(rows)]).astype("<u4")
    buf.write(struct.pack("<I", len(offsets)))
    buf.write(offsets.tobytes())
    buf.write(np.ascontiguousarray(values[param.trainable], dtype="<f8").tobytes())


def checkpoint_bytes(trainer: Trainer) -> bytes:
    model = trainer.model
    header = {
        "channels": model.channels,
        "m_plan": model.basis_sizes,
        "block": model.block,
        "pool": model.pool,
        "normalize_basis": model.normalize_basis,
        "model_seed": model.seed,
        "config": asdict(trainer.config),
        "step": trainer.step,
        "epoch": trainer.epoch,
        "position": trainer.position,
        "order": None if trainer.order is None else [int(i) for i in trainer.order],
        "epoch_losses": list(trainer.epoch_losses),
        "adam_t": trainer.optimizer.t,
        "rng": trainer.rng.bit_generator.state,
    }
    hier = model.hierarchy.to_bytes()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, hierarchy_fingerprint(hier)))
    _write_block(buf, json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
    _write_block(buf, hier)
    opt = trainer.optimizer
    for p, m, v in zip(model.parameters(), opt.m, opt.v):
        name = p.name.encode()
        buf.write(struct.pack("<I", len(name)) + name)
        buf.write(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        buf.write(struct.pack("<B", p.trainable is not None))
        for arr in (p.data, m, v):
            _write_values(buf, p, arr)
    return buf.getvalue()


def save_checkpoint(path, trainer: Trainer) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(trainer))


class _Cursor:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise InputError("checkpoint is truncated")
        out = self.data[self.pos: self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def block(self):
        (n,) = self.unpack("<I")
        return self.take(n)

    def floats(self, n):
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)


def _read_values(cur, param, masked):
    if not masked:
        return cur.floats(int(np.prod(param.shape))).reshape(param.shape)
    (n_off,) = cur.unpack("<I")
    cur.take(4 * n_off)
    out = np.zeros(param.shape)
    out[param.trainable] = cur.floats(int(param.trainable.sum()))
    return out


def checkpoint_from_bytes(data: bytes) -> Trainer:
    if data[: len(MAGIC)] != MAGIC:
        raise InputError("not a checkpoint file (bad magic bytes)")
    cur = _Cursor(data)
    cur.pos = len(MAGIC)
    version, fingerprint = cur.unpack("<IQ")
    if version != VERSION:
        raise InputError(f"unsupported checkpoint version {version}")
    header = json.loads(cur.block())
    hier_bytes = cur.block()
    if hierarchy_fingerprint(hier_bytes) != fingerprint:
        raise InputError("checkpoint hierarchy does not match its fingerprint")
    hierarchy = deserialize_hierarchy(hier_bytes)
    model = AutoencoderModel(
        hierarchy, header["channels"], header["m_plan"], block=header["block"], pool=header["pool"],
        normalize_basis=header["normalize_basis"], seed=header["model_seed"],
    )
    trainer = Trainer(model, TrainConfig(**header["config"]))
    opt = trainer.optimizer
    for k, p in enumerate(model.parameters()):
        (n,) = cur.unpack("<I")
        name = cur.take(n).decode()
        (ndim,) = cur.unpack("<I")
        shape = cur.unpack(f"<{ndim}I")
        (masked,) = cur.unpack("<B")
        if name != p.name or tuple(shape) != p.shape or bool(masked) != (p.trainable is not None):
            raise InputError(f"checkpoint parameter {k} ({name}{tuple(shape)}) does not fit the model")
        p.data[...] = _read_values(cur, p, masked)
        opt.m[k][...] = _read_values(cur, p, masked)
        opt.v[k][...] = _read_values(cur, p, masked)
    if cur.pos != len(data):
        raise InputError("trailing bytes after checkpoint payload")
    opt.t = header["adam_t"]
    trainer.step = header["step"]
    trainer.epoch = header["epoch"]
    trainer.position = header["position"]
    trainer.order = None if header["order"] is None else np.array(header["order"], dtype=np.int64)
    trainer.epoch_losses = list(header["epoch_losses"])
    trainer.rng.bit_generator.state = header["rng"]
    return trainer


def load_checkpoint(path) -> Trainer:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
