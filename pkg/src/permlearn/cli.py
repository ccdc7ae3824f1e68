"""Command-line front end: ``permlearn <command> [options]``.

Exit codes: 0 success, 1 failed gradient check, 2 usage or format error,
3 numerical divergence.
"""
from __future__ import annotations

import argparse
import hashlib
import sys
import time
from pathlib import Path

import numpy as np

from . import data, gradcheck, model, permcore
from .assign import brute_force_round, round_to_permutation
from .errors import DivergenceError, FormatError
from .permcore import Permutation
from .sinkhorn import SinkhornConfig, sinkhorn_backward, sinkhorn_forward, to_positive

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

# key -> default; the default's type decides how file/override values are parsed
DEFAULTS = {
    "task": "synth",
    "l": 4,
    "d": 8,
    "n_sequences": 2000,
    "n_eval": 500,
    "noise_sigma": 0.05,
    "seed": 0,
    "grid": 3,
    "patch_px": 16,
    "image_dir": "",
    "subtract_mean": True,
    "jitter": False,
    "hidden": 32,
    "hidden2": 128,
    "learning_rate": 1e-2,
    "momentum": 0.9,
    "batch_size": 32,
    "iterations": 3000,
    "weight_decay": 1e-4,
    "loss_kind": "sinkhorn_ce",
    "eval_every": 0,
    "sinkhorn_iterations": 5,
    "epsilon": 1e-3,
    "clamp": 50.0,
    "workers": 1,
}
MANIFEST_NAME = "manifest.txt"


class UsageError(Exception):
    pass


def _coerce(key, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise UsageError(f"invalid value {raw!r} for {key}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise UsageError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve_config(config_path=None, overrides=()) -> dict:
    cfg = dict(DEFAULTS)
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise UsageError(f"config file {path} does not exist")
        cfg.update(parse_config_text(path.read_text(), str(path)))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} must look like key=value")
        key, value = item.split("=", 1)
        key = key.strip()
        if key not in DEFAULTS:
            raise UsageError(f"unknown config key {key!r}")
        cfg[key] = _coerce(key, value)
    if cfg["task"] not in ("synth", "patch"):
        raise UsageError(f"task must be 'synth' or 'patch', got {cfg['task']!r}")
    if cfg["loss_kind"] not in model.LOSS_KINDS:
        raise UsageError(f"loss_kind must be one of {', '.join(model.LOSS_KINDS)}")
    return cfg


def config_text(cfg: dict) -> str:
    def fmt(v):
        return str(v).lower() if isinstance(v, bool) else str(v)

    return "".join(f"{k} = {fmt(cfg[k])}\n" for k in DEFAULTS)


def sinkhorn_config(cfg) -> SinkhornConfig:
    return SinkhornConfig(cfg["sinkhorn_iterations"], cfg["epsilon"], cfg["clamp"])


def train_config(cfg) -> model.TrainConfig:
    return model.TrainConfig(
        learning_rate=cfg["learning_rate"],
        momentum=cfg["momentum"],
        batch_size=cfg["batch_size"],
        iterations=cfg["iterations"],
        weight_decay=cfg["weight_decay"],
        seed=cfg["seed"],
        sinkhorn=sinkhorn_config(cfg),
        loss_kind=cfg["loss_kind"],
        eval_every=cfg["eval_every"] or None,
        workers=cfg["workers"],
    )


def synth_spec(cfg) -> data.SynthSpec:
    return data.SynthSpec(cfg["l"], cfg["d"], cfg["n_sequences"] + cfg["n_eval"], cfg["noise_sigma"], cfg["seed"])


def grid_spec(cfg) -> data.PatchGridSpec:
    return data.PatchGridSpec(cfg["grid"], cfg["patch_px"], cfg["image_dir"] or None, cfg["jitter"])


def _image_paths(cfg):
    if not cfg["image_dir"]:
        raise UsageError("task=patch needs image_dir")
    directory = Path(cfg["image_dir"])
    if not directory.is_dir():
        raise UsageError(f"image directory {directory} does not exist")
    manifest = directory / MANIFEST_NAME
    if not manifest.is_file():
        raise UsageError(f"{manifest} not found (create it with gen-data --generate-images N)")
    paths = data.read_manifest(manifest)
    missing = [p for p in paths if not p.is_file()]
    if missing:
        raise UsageError(f"manifest lists missing file {missing[0]}")
    return paths


def load_dataset(cfg):
    """``(train_sequences, eval_sequences)`` as ordered ``(N, l, d)`` arrays."""
    if cfg["task"] == "synth":
        x, _, _ = data.synth_arrays(synth_spec(cfg))
        return x[: cfg["n_sequences"]], x[cfg["n_sequences"] :]
    paths = _image_paths(cfg)
    spec = grid_spec(cfg)
    rng = np.random.default_rng([cfg["seed"], 2]) if spec.jitter else None
    images = [data.load_pixmap(p) for p in paths]
    x = data.patch_sequences(images, spec, cfg["subtract_mean"], rng)
    n_eval = min(cfg["n_eval"], len(x) // 2)
    return x[: len(x) - n_eval], x[len(x) - n_eval :]


def _digest(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def cmd_gen_data(args, cfg, out):
    if cfg["task"] == "synth":
        x, c, pis = data.synth_arrays(synth_spec(cfg))
        print(
            f"task=synth sequences={cfg['n_sequences']} eval={cfg['n_eval']} l={cfg['l']} d={cfg['d']} "
            f"seed={cfg['seed']} sha256={_digest([x, c, pis])}",
            file=out,
        )
        return EXIT_OK
    if args.generate_images:
        if not cfg["image_dir"]:
            raise UsageError("task=patch needs image_dir")
        directory = Path(cfg["image_dir"])
        directory.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng(cfg["seed"])
        size = cfg["grid"] * cfg["patch_px"]
        names = []
        for k in range(args.generate_images):
            name = f"img{k:05d}.ppm"
            data.save_pixmap(data.procedural_image(rng, size), directory / name)
            names.append(name)
        data.write_manifest(directory / MANIFEST_NAME, names)
    paths = _image_paths(cfg)
    images = [data.load_pixmap(p) for p in paths]
    spec = grid_spec(cfg)
    for p, img in zip(paths, images):
        if img.width < spec.grid * spec.patch_px or img.height < spec.grid * spec.patch_px:
            raise UsageError(f"{p} is {img.width}x{img.height}, too small for the configured grid")
    print(
        f"task=patch images={len(images)} grid={spec.grid} patch_px={spec.patch_px} "
        f"seed={cfg['seed']} sha256={_digest([i.pixels for i in images])}",
        file=out,
    )
    return EXIT_OK


def cmd_train(args, cfg, out):
    out_dir = Path(args.out_dir)
    ckpt = out_dir / "checkpoint.dpnm"
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        raise UsageError(f"{out_dir} is not empty; pass --force to overwrite")
    train_x, eval_x = load_dataset(cfg)
    tcfg = train_config(cfg)
    result = model.train(train_x, tcfg, eval_x if len(eval_x) else None, cfg["hidden"], cfg["hidden2"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config_text(cfg))
    model.save_checkpoint(result.params, ckpt)
    (out_dir / "metrics.csv").write_text(result.log_text())
    if result.log:
        print(result.log[-1].csv(), file=out)
    print(f"checkpoint={ckpt}", file=out)
    return EXIT_OK


def _eval_metrics(preds, truths, mats):
    kt = np.mean([permcore.kendall_tau(p, t) for p, t in zip(preds, truths)])
    hs = np.mean([permcore.hamming_similarity(p, t) for p, t in zip(preds, truths)])
    ne = np.mean([permcore.normalization_error(m) for m in mats])
    return kt, hs, ne


def cmd_eval(args, cfg, out):
    rng = np.random.default_rng([cfg["seed"], 1])
    if args.predictor == "random":
        l = cfg["grid"] ** 2 if cfg["task"] == "patch" else cfg["l"]
        n = args.samples or cfg["n_eval"]
        truths = [Permutation(p) for p in rng.permuted(np.tile(np.arange(l), (n, 1)), axis=1)]
        preds = [Permutation(p) for p in rng.permuted(np.tile(np.arange(l), (n, 1)), axis=1)]
        mats = [p.matrix() for p in preds]
    else:
        _, eval_x = load_dataset(cfg)
        if not len(eval_x):
            raise UsageError("no held-out sequences (n_eval = 0)")
        xs, pis = model.shuffle_batch(eval_x, rng)
        truths = [Permutation(p) for p in pis]
        if args.predictor == "oracle":
            preds = truths
            mats = [t.matrix() for t in truths]
        else:
            if not args.checkpoint:
                raise UsageError("--checkpoint is required for the model predictor")
            params = model.load_checkpoint(args.checkpoint)
            head = "sinkhorn" if cfg["loss_kind"] == "sinkhorn_ce" else "naive"
            mats, _ = model.forward(params, xs, sinkhorn_config(cfg), head)
            preds = [round_to_permutation(m).perm for m in mats]
    kt, hs, ne = _eval_metrics(preds, truths, mats)
    text = f"n,kt,hs,ne\n{len(truths)},{kt:.6g},{hs:.6g},{ne:.6g}\n"
    out.write(text)
    if args.output:
        Path(args.output).write_text(text)
    return EXIT_OK


def _parse_perm(text, l):
    try:
        pi = [int(t) for t in text.replace(",", " ").split()]
        perm = Permutation(pi)
    except ValueError as exc:
        raise UsageError(f"invalid permutation {text!r}: {exc}") from None
    if perm.l != l:
        raise UsageError(f"permutation has length {perm.l}, grid needs {l}")
    return perm


def cmd_unshuffle(args, cfg, out):
    params = model.load_checkpoint(args.checkpoint)
    img = data.load_pixmap(args.image)
    d, _, _, l = params.dims
    grid = int(round(np.sqrt(l)))
    if grid * grid != l:
        raise UsageError(f"checkpoint predicts sequences of length {l}, not a square grid")
    if args.grid and args.grid != grid:
        raise UsageError(f"--grid {args.grid} does not match the checkpoint's grid {grid}")
    patch_px = int(round(np.sqrt(d / img.channels)))
    if patch_px * patch_px * img.channels != d:
        raise UsageError(f"checkpoint feature size {d} does not fit {img.channels}-channel patches")
    spec = data.PatchGridSpec(grid, patch_px)
    patches = data.grid_split(img, spec)
    if args.perm:
        perm = _parse_perm(args.perm, l)
    else:
        feats = np.stack([data.patch_features(p, not args.no_subtract_mean) for p in patches])
        perm, _, _ = model.predict(params, feats, sinkhorn_config(cfg))
    data.save_pixmap(data.reassemble(patches, perm), args.output)
    print("pi " + " ".join(map(str, perm.pi)), file=out)
    return EXIT_OK


def cmd_gradcheck(args, cfg, out):
    rng = np.random.default_rng(args.seed)
    params = model.init_params(args.d, args.h, args.h2, args.l, rng)
    x = rng.standard_normal((args.batch, args.l, args.d))
    pis = rng.permuted(np.tile(np.arange(args.l), (args.batch, 1)), axis=1)
    report = gradcheck.check_model_gradients(
        params,
        x,
        pis,
        SinkhornConfig(args.sinkhorn_iterations, cfg["epsilon"], cfg["clamp"]),
        args.loss_kind,
        args.weight_decay,
        tolerance=args.tol,
        inject_fault=args.inject_fault,
    )
    print("tensor,max_rel_error,worst_index,analytic,numeric", file=out)
    for line in report.lines():
        print(line, file=out)
    return EXIT_OK if report.passed else EXIT_FAIL


def read_matrix(path) -> np.ndarray:
    rows = []
    width = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = [float(t) for t in line.split()]
        except ValueError:
            raise FormatError(f"{path}: non-numeric entry on line {lineno}") from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise FormatError(f"{path}: line {lineno} has {len(row)} entries, expected {width}")
        rows.append(row)
    if not rows:
        raise FormatError(f"{path}: empty matrix file")
    if len(rows) != width:
        raise FormatError(f"{path}: matrix is {len(rows)}x{width}, must be square")
    return np.array(rows)


def cmd_round(args, cfg, out):
    q = read_matrix(args.matrix)
    res = brute_force_round(q) if args.brute_force else round_to_permutation(q)
    print("pi " + " ".join(map(str, res.perm.pi)), file=out)
    print(f"objective {res.objective:.6g}", file=out)
    return EXIT_OK


def cmd_bench(args, cfg, out):
    rng = np.random.default_rng(args.seed)
    scfg = SinkhornConfig(cfg["sinkhorn_iterations"], cfg["epsilon"], cfg["clamp"])
    print("operation,l,seconds_per_call", file=out)
    for l in args.sizes:
        scores = rng.standard_normal((l, l))

        def timed(fn):
            t0 = time.perf_counter()
            for _ in range(args.repeats):
                fn()
            return (time.perf_counter() - t0) / args.repeats

        q0 = to_positive(scores, scfg)
        q, tape = sinkhorn_forward(q0, scfg)
        rows = [
            ("sinkhorn_forward", timed(lambda: sinkhorn_forward(q0, scfg))),
            ("sinkhorn_backward", timed(lambda: sinkhorn_backward(np.ones((l, l)), tape))),
            ("round_to_permutation", timed(lambda: round_to_permutation(q))),
        ]
        for name, sec in rows:
            print(f"{name},{l},{sec:.6g}", file=out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="permlearn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        return p

    p = with_config(sub.add_parser("gen-data", help="generate or validate a dataset and print a summary"))
    p.add_argument("--generate-images", type=int, default=0, metavar="N", help="write N procedural images to image_dir")
    p.set_defaults(func=cmd_gen_data)

    p = with_config(sub.add_parser("train", help="train a model; writes checkpoint, metrics and config"))
    p.add_argument("--out-dir", required=True)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.add_argument("--workers", type=int, help="data-parallel gradient workers")
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("eval", help="report KT, HS and NE on the held-out split"))
    p.add_argument("--checkpoint")
    p.add_argument("--predictor", choices=("model", "oracle", "random"), default="model")
    p.add_argument("--samples", type=int, default=0, help="sample count for the random predictor")
    p.add_argument("--output", help="also write the table to this file")
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("unshuffle", help="predict a puzzle's permutation and reassemble it"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="input PPM/PGM whose grid cells are shuffled")
    p.add_argument("--output", required=True, help="reassembled PPM/PGM")
    p.add_argument("--grid", type=int, help="grid size (checked against the checkpoint)")
    p.add_argument("--perm", help="use this permutation instead of the model's prediction")
    p.add_argument("--no-subtract-mean", action="store_true", help="feed raw patch intensities")
    p.set_defaults(func=cmd_unshuffle)

    p = with_config(sub.add_parser("gradcheck", help="finite-difference check of the full model gradient"))
    p.add_argument("--l", type=int, default=4)
    p.add_argument("--d", type=int, default=4)
    p.add_argument("--h", type=int, default=5)
    p.add_argument("--h2", type=int, default=6)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sinkhorn-iterations", type=int, default=5)
    p.add_argument("--loss-kind", choices=model.LOSS_KINDS, default="sinkhorn_ce")
    p.add_argument("--weight-decay", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--inject-fault", action="store_true", help="flip a gradient sign to test the checker")
    p.set_defaults(func=cmd_gradcheck)

    p = with_config(sub.add_parser("round", help="round a matrix file to the nearest permutation"))
    p.add_argument("matrix", help="text file, one whitespace-separated row per line")
    p.add_argument("--brute-force", action="store_true", help="use exhaustive search (l <= 9)")
    p.set_defaults(func=cmd_round)

    p = with_config(sub.add_parser("bench", help="time Sinkhorn and rounding"))
    p.add_argument("--sizes", type=int, nargs="+", default=[4, 8, 16])
    p.add_argument("--repeats", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.config, args.set)
        if getattr(args, "workers", None):
            cfg["workers"] = args.workers
        return args.func(args, cfg, out)
    except (UsageError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
