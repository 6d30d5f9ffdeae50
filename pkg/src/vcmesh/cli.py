"""Command-line entry point: ``vcmesh <command> ...``.

Exit codes: 0 success, 1 input/configuration error, 2 numerical
verification failure.
"""

from __future__ import annotations

import argparse
import configparser
import glob
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import InputError, VcMeshError
from .layers import param_count
from .mesh import MeshDataset, MeshTopology, bridge_components, load_mesh, read_obj_faces, write_obj
from .model import (
    AutoencoderModel, LatentCode, TrainConfig, Trainer, TrainLog, interpolate_latent, mix_latent,
)
from .sampling import build_hierarchy, load_hierarchy, save_hierarchy, summarize

logger = logging.getLogger("vcmesh")

EXIT_OK, EXIT_INPUT, EXIT_VERIFY = 0, 1, 2


# -- helpers ---------------------------------------------------------------------

def parse_level(text: str):
    """``"s:r"`` or ``"s:r:p1,p2"`` -> ``(s, r, [p1, p2])``."""
    parts = text.split(":")
    if len(parts) not in (2, 3):
        raise InputError(f"level spec {text!r} must look like s:r or s:r:pinned,...")
    try:
        s, r = int(parts[0]), int(parts[1])
        pinned = [int(p) for p in parts[2].split(",") if p.strip()] if len(parts) == 3 else []
    except ValueError:
        raise InputError(f"level spec {text!r} has a non-integer field") from None
    if s < 1 or r < 0:
        raise InputError(f"level spec {text!r}: stride must be >= 1 and radius >= 0")
    return s, r, pinned


def parse_int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise InputError(f"expected a comma-separated integer list, got {text!r}") from None


def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"file not found: {p}")
    return p


def _faces(path):
    return read_obj_faces(path) if Path(path).suffix.lower() == ".obj" else []


def write_latent(path, code: LatentCode):
    lines = [f"fingerprint {code.fingerprint:016x}", "shape {} {}".format(*code.values.shape)]
    lines += [" ".join(repr(float(v)) for v in row) for row in code.values]
    Path(path).write_text("\n".join(lines) + "\n")


def read_latent(path) -> LatentCode:
    lines = _existing(path).read_text().splitlines()
    try:
        fp = int(lines[0].split()[1], 16)
        rows, cols = (int(v) for v in lines[1].split()[1:3])
        values = np.array([[float(v) for v in ln.split()] for ln in lines[2: 2 + rows]])
    except (IndexError, ValueError):
        raise InputError(f"{path}: malformed latent code file") from None
    if values.shape != (rows, cols):
        raise InputError(f"{path}: latent code shape does not match its header")
    return LatentCode(values, fp)


def _fits_base(topo: MeshTopology, base: MeshTopology) -> bool:
    """Equal, or ``base`` is ``topo`` plus bridging edges."""
    if topo == base:
        return True
    return topo.num_vertices == base.num_vertices and set(topo.edges()) <= set(base.edges())


def _load_features(path, model: AutoencoderModel) -> np.ndarray:
    topo, feats = load_mesh(_existing(path))
    if not _fits_base(topo, model.hierarchy.base):
        raise InputError(f"{path}: mesh topology differs from the checkpoint's base mesh")
    return feats.values


# -- configuration ----------------------------------------------------------------

CONFIG_KEYS = {
    "data": {"mesh", "dataset", "train_fraction", "val_fraction", "split_seed", "bridge"},
    "hierarchy": {"levels", "seed", "pin", "file"},
    "model": {"channels", "m_plan", "block", "pool", "normalize_basis", "seed"},
    "train": {f.name for f in fields(TrainConfig)} | {"checkpoint_every_epoch"},
    "output": {"dir"},
}


def read_config(path):
    """Parse and validate a run configuration; all paths are checked up front."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(_existing(path)) as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise InputError(f"{path}: {exc}") from None
    for section in cp.sections():
        if section not in CONFIG_KEYS:
            raise InputError(f"{path}: unknown section [{section}]")
        unknown = set(cp[section]) - CONFIG_KEYS[section]
        if unknown:
            raise InputError(f"{path}: unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    base = Path(path).parent

    def get(section, key, default=None):
        return cp.get(section, key, fallback=default) if cp.has_section(section) else default

    def resolve(p):
        return p if Path(p).is_absolute() else str(base / p)

    cfg = {}
    pattern = get("data", "dataset")
    if not pattern:
        raise InputError(f"{path}: [data] dataset glob is required")
    files = sorted(glob.glob(resolve(pattern)))
    if not files:
        raise InputError(f"{path}: dataset glob {pattern!r} matched no files")
    cfg["files"] = files
    mesh = get("data", "mesh")
    cfg["mesh"] = str(_existing(resolve(mesh))) if mesh else files[0]
    try:
        cfg["train_fraction"] = float(get("data", "train_fraction", "1.0"))
        cfg["val_fraction"] = float(get("data", "val_fraction", "0.0"))
        cfg["split_seed"] = int(get("data", "split_seed", "0"))
        bridge = get("data", "bridge")
        cfg["bridge"] = float(bridge) if bridge else None
        hfile = get("hierarchy", "file")
        cfg["hierarchy_file"] = str(_existing(resolve(hfile))) if hfile else None
        # whitespace separates levels; commas separate pinned vertices within one
        cfg["levels"] = [parse_level(t) for t in get("hierarchy", "levels", "2:2 2:2").split()]
        cfg["hierarchy_seed"] = int(get("hierarchy", "seed", "0"))
        cfg["pin"] = parse_int_list(get("hierarchy", "pin", ""))
        channels = get("model", "channels")
        if not channels:
            raise InputError(f"{path}: [model] channels is required (e.g. 3,16,32,16,3)")
        cfg["channels"] = parse_int_list(channels)
        m_plan = get("model", "m_plan", "auto").strip()
        cfg["m_plan"] = "auto" if m_plan == "auto" else parse_int_list(m_plan)
        cfg["block"] = get("model", "block", "residual")
        cfg["pool"] = get("model", "pool", "vd")
        cfg["normalize_basis"] = cp.getboolean("model", "normalize_basis", fallback=False) \
            if cp.has_section("model") else False
        cfg["model_seed"] = int(get("model", "seed", "0"))
        tc = {}
        for f in fields(TrainConfig):
            raw = get("train", f.name)
            if raw is None:
                continue
            if f.name in ("batch_size", "epochs", "seed"):
                tc[f.name] = int(raw)
            elif f.name == "max_steps":
                tc[f.name] = None if raw.strip().lower() == "none" else int(raw)
            else:
                tc[f.name] = float(raw)
        cfg["train"] = TrainConfig(**tc)
        cfg["checkpoint_every_epoch"] = cp.getboolean("train", "checkpoint_every_epoch", fallback=False) \
            if cp.has_section("train") else False
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None
    if not 0 <= cfg["train_fraction"] + cfg["val_fraction"] <= 1:
        raise InputError(f"{path}: split fractions must sum to at most 1")
    cfg["out"] = resolve(get("output", "dir", "run"))
    return cfg


def load_dataset(files, mesh_path, train_fraction=1.0, val_fraction=0.0, split_seed=0,
                 bridge=None) -> tuple[MeshDataset, list]:
    """Load samples sharing ``mesh_path``'s topology; ``bridge`` links close components."""
    topo, template = load_mesh(mesh_path)
    samples = []
    for f in files:
        t, feats = load_mesh(f)
        if t != topo:
            raise InputError(f"{f}: topology differs from {mesh_path}")
        samples.append(feats)
    n = len(samples)
    order = np.random.default_rng(split_seed).permutation(n)
    n_train = int(round(train_fraction * n))
    n_val = int(round(val_fraction * n))
    splits = ["test"] * n
    for rank, idx in enumerate(order):
        splits[idx] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    if bridge is not None:
        topo = bridge_components(topo, template, bridge)
    return MeshDataset(topo, samples, splits), _faces(mesh_path)


# -- commands ----------------------------------------------------------------------

def cmd_build_hierarchy(args):
    topo, positions = load_mesh(_existing(args.mesh))
    if args.bridge is not None:
        topo = bridge_components(topo, positions, args.bridge)
    levels = [parse_level(t) for t in (args.levels or ["2:2", "2:2"])]
    h = build_hierarchy(topo, levels, seed=args.seed, pin=parse_int_list(args.pin or ""))
    save_hierarchy(h, args.out)
    text = summarize(h)
    Path(str(args.out) + ".txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_train(args):
    cfg = read_config(args.config)
    dataset, faces = load_dataset(cfg["files"], cfg["mesh"], cfg["train_fraction"],
                                  cfg["val_fraction"], cfg["split_seed"], cfg["bridge"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        trainer = load_checkpoint(_existing(args.resume))
        if trainer.model.hierarchy.base != dataset.topology:
            raise InputError("checkpoint base mesh does not match the dataset")
    else:
        if cfg["hierarchy_file"]:
            h = load_hierarchy(cfg["hierarchy_file"])
            if h.base != dataset.topology:
                raise InputError("hierarchy base mesh does not match the dataset")
        else:
            h = build_hierarchy(dataset.topology, cfg["levels"], cfg["hierarchy_seed"], cfg["pin"])
        model = AutoencoderModel(h, cfg["channels"], cfg["m_plan"], block=cfg["block"], pool=cfg["pool"],
                                 normalize_basis=cfg["normalize_basis"], seed=cfg["model_seed"])
        trainer = Trainer(model, cfg["train"])
    save_hierarchy(trainer.model.hierarchy, out / "hierarchy.bin")
    ckpt = out / "model.ckpt"
    log_path = out / "train_log.tsv"
    log = TrainLog()
    if not args.resume:
        log_path.write_text("")

    def on_epoch(tr):
        with log_path.open("a") as fh:
            fh.write(log.epochs[-1].tsv() + "\n")
        if cfg["checkpoint_every_epoch"]:
            save_checkpoint(out / f"epoch_{tr.epoch:04d}.ckpt", tr)

    trainer.fit(dataset.subset("train"), dataset.subset("val"), log=log, on_epoch=on_epoch)
    save_checkpoint(ckpt, trainer)
    print(f"trained {trainer.step} steps over {trainer.epoch} epochs; checkpoint {ckpt}")
    if log.epochs:
        print(f"final epoch train L1 {log.epochs[-1].train_l1:.6g}")
    return EXIT_OK


def cmd_reconstruct(args):
    trainer = load_checkpoint(_existing(args.ckpt))
    model = trainer.model
    inputs = [args.mesh] if args.mesh else sorted(glob.glob(args.dataset or ""))
    if not inputs or not all(inputs):
        raise InputError("reconstruct needs --mesh or a --dataset glob matching files")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for path in inputs:
        x = _load_features(path, model)
        pred = model.reconstruct(x)
        write_obj(out / Path(path).with_suffix(".obj").name, pred, _faces(path))
        err = float(np.linalg.norm(pred - x, axis=1).mean())
        rows.append(f"{Path(path).name}\t{err!r}")
        print(f"{Path(path).name}\tmean euclidean error {err:.6g}")
    (out / "errors.tsv").write_text("\n".join(rows) + "\n")
    return EXIT_OK


def cmd_encode(args):
    model = load_checkpoint(_existing(args.ckpt)).model
    write_latent(args.out, model.encode(_load_features(args.mesh, model)))
    return EXIT_OK


def cmd_decode(args):
    model = load_checkpoint(_existing(args.ckpt)).model
    pred = model.decode(read_latent(args.code))
    write_obj(args.out, pred, _faces(args.template) if args.template else [])
    return EXIT_OK


def _subset(text, model):
    rows = parse_int_list(text)
    n = model.latent_shape[0]
    bad = [v for v in rows if not 0 <= v < n]
    if bad:
        raise InputError(f"latent vertices {bad} outside [0, {n})")
    return rows


def cmd_interpolate(args):
    model = load_checkpoint(_existing(args.ckpt)).model
    src = model.encode(_load_features(args.source, model))
    dst = model.encode(_load_features(args.target, model))
    subset = _subset(args.vertices, model) if args.vertices else range(model.latent_shape[0])
    if args.steps < 1:
        raise InputError("--steps must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    faces = _faces(args.source)
    ts = np.linspace(0.0, 1.0, args.steps) if args.steps > 1 else np.array([0.0])
    for k, t in enumerate(ts):
        frame = model.decode(interpolate_latent(src, dst, subset, float(t)))
        write_obj(out / f"frame_{k:04d}.obj", frame, faces)
        print(f"frame {k}: t={t:g}")
    return EXIT_OK


def cmd_mix(args):
    model = load_checkpoint(_existing(args.ckpt)).model
    base = model.encode(_load_features(args.base, model))
    donor = model.encode(_load_features(args.donor, model))
    mixed = mix_latent(base, donor, _subset(args.vertices, model))
    write_obj(args.out, model.decode(mixed), _faces(args.base))
    return EXIT_OK


def cmd_gradcheck(args):
    from .verify import TOLERANCE, gradient_suite

    ok = True
    for name, err in gradient_suite(args.scale, args.seed):
        status = "ok" if err < TOLERANCE else "FAIL"
        ok &= err < TOLERANCE
        print(f"{status:4s} {name:36s} max rel err {err:.3e}")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_stats(args):
    model = load_checkpoint(_existing(args.ckpt)).model
    total = 0
    for b, block in enumerate(model.blocks):
        for layer in block.layers():
            count = param_count(layer)
            total += count
            print(f"block {b} {layer.kind:12s} in={layer.map.in_vertices:6d} out={layer.map.out_vertices:6d} "
                  f"sumE={layer.map.total_size:7d} params={count}")
    print(f"total parameters {total}")
    n, c = model.latent_shape
    print(f"latent shape {n} x {c} ({n * c} values)")
    for k, anchor in enumerate(model.hierarchy.anchors()):
        print(f"latent vertex {k}: base anchor {anchor}")
    return EXIT_OK


def cmd_make_synthetic(args):
    from .synthetic import make_synthetic

    if args.subdiv < 0 or args.samples < 1 or args.amplitude < 0:
        raise InputError("subdiv >= 0, samples >= 1 and amplitude >= 0 are required")
    faces, dataset = make_synthetic(args.base, args.subdiv, args.samples, args.seed, args.amplitude)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, sample in enumerate(dataset.samples):
        write_obj(out / f"sample_{k:04d}.obj", sample.values, faces)
    print(f"wrote {len(dataset.samples)} samples of {dataset.topology.num_vertices} vertices to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vcmesh", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-hierarchy", help="sample a mesh into a multi-level hierarchy")
    p.add_argument("--mesh", required=True)
    p.add_argument("--levels", action="append", help="s:r[:pinned,...]; repeat per level")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pin", help="base vertices carried to the coarsest level")
    p.add_argument("--bridge", type=float, help="link mesh components closer than this distance")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_hierarchy)

    p = sub.add_parser("train", help="train an autoencoder from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="continue from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="encode+decode meshes and report errors")
    p.add_argument("--ckpt", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--mesh")
    g.add_argument("--dataset", help="glob of mesh files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("encode", help="write a mesh's latent code")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a latent code file to OBJ")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--code", required=True)
    p.add_argument("--template", help="mesh whose faces are copied to the output")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("interpolate", help="interpolate selected latent vertices")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--vertices", help="latent vertex indices (default: all)")
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("mix", help="copy selected latent vertices from a donor")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--donor", required=True)
    p.add_argument("--vertices", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    p.add_argument("--scale", choices=("small", "full"), default="small")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("stats", help="parameter counts and latent layout of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("make-synthetic", help="write a synthetic deformation dataset")
    p.add_argument("--base", choices=("icosphere", "grid"), default="icosphere")
    p.add_argument("--subdiv", type=int, default=2)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--amplitude", type=float, default=0.1, help="fraction of the bounding-box diagonal")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_synthetic)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (VcMeshError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
