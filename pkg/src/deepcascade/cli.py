"""Command-line front end.

Every command writes diagnostics to stderr and one JSON line to stdout.
Exit codes: 0 success, 2 usage, 3 malformed file, 4 shape mismatch, 5 NaN.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .cascade import CascadeConfig, ModelFormatError, build, count_params, load_model, parse_arch, reconstruct, save_model
from .fileio import FormatError, RunConfig, read_tensor, write_tensor
from .gradcheck import check_gradients, random_problem
from .kspace import NoiseSpec, SamplingMask, generate_mask, undersample
from .metrics import evaluate, temporal_profile
from .phantom import default_spec, generate, make_dataset
from .tensor import ShapeError
from .training import AugConfig, TrainConfig, Trainer



EXIT_USAGE, EXIT_FORMAT, EXIT_SHAPE, EXIT_NUMERIC = 2, 3, 4, 5
GRADCHECK_MAX_PARAMS = 100_000
TENSOR_SUFFIX = ".kt"


class UsageError(Exception):
    pass


def _emit(**fields) -> None:
    print(json.dumps(fields, sort_keys=True, default=float))


def _read(path) -> np.ndarray:
    return read_tensor(path)


def _read_mask(path, shape) -> SamplingMask:
    m = _read(path)
    if m.ndim == 3 and m.shape == tuple(shape[-3:]):
        m = m[0]
    if m.shape != tuple(shape[-2:]) and m.shape != tuple(shape[:1]) + tuple(shape[-2:]):
        raise ShapeError(f"mask {m.shape} does not match k-space {tuple(shape)}")
    if not np.all((m == 0) | (m == 1)):
        raise FormatError(f"{path}: mask entries must be 0 or 1")
    return SamplingMask(m.real.astype(bool))


def _sequences(arr: np.ndarray) -> list:
    if arr.ndim == 3:
        return [arr]
    if arr.ndim == 4:
        return list(arr)
    raise ShapeError(f"expected (n_x, n_y, n_t) or (batch, n_x, n_y, n_t), got {arr.shape}")


def _load_dir(path) -> list:
    files = sorted(Path(path).glob(f"*{TENSOR_SUFFIX}"))
    if not files:
        raise FormatError(f"no {TENSOR_SUFFIX} files in {path}")
    seqs = []
    for f in files:
        seqs.extend(_sequences(_read(f)))
    shapes = {s.shape for s in seqs}
    if len(shapes) != 1:
        raise ShapeError(f"sequences in {path} differ in shape: {sorted(shapes)}")
    return [s.astype(np.complex128) for s in seqs]


# -- commands -------------------------------------------------------------------


def cmd_phantom(args) -> int:
    cfg = RunConfig.load(args.spec) if args.spec else RunConfig()
    keys = ("pulsation", "drift", "period")
    kw = {k: cfg[k] for k in keys if k in cfg}
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    template = default_spec(cfg.get("n_x", 64), cfg.get("n_y", 64), cfg.get("n_t", 12), seed=seed, **kw)
    count = args.count if args.count is not None else cfg.get("count", 1)
    out = Path(args.out)
    if count == 1:
        x = generate(template)
        write_tensor(out, x.astype(np.complex128))
        _emit(command="phantom", out=str(out), shape=list(x.shape), count=1)
        return 0
    out.mkdir(parents=True, exist_ok=True)
    for i, x in enumerate(make_dataset(template, count, seed)):
        write_tensor(out / f"seq{i:03d}{TENSOR_SUFFIX}", x.astype(np.complex128))
    _emit(command="phantom", out=str(out), shape=list(x.shape), count=count)
    return 0


def cmd_mask(args) -> int:
    mask = generate_mask(args.ny, args.nt, args.acc, args.seed, n_central=args.n_central)
    write_tensor(args.out, mask.lines.astype(np.float32))
    _emit(command="mask", out=args.out, shape=list(mask.lines.shape), lines=int(mask.lines.sum()), fraction=float(mask.lines.mean()))
    return 0


def cmd_undersample(args) -> int:
    x = _read(getattr(args, "in"))
    if x.ndim not in (3, 4):
        raise ShapeError(f"image must be (n_x, n_y, n_t) or batched, got {x.shape}")
    mask = _read_mask(args.mask, x.shape)
    if x.ndim == 4 and mask.lines.ndim == 2:
        mask = SamplingMask(np.broadcast_to(mask.lines, (x.shape[0],) + mask.lines.shape))
    noise = NoiseSpec(args.sigma2, args.seed) if args.sigma2 > 0 else None
    s0 = undersample(x.astype(np.complex128), mask, noise)
    write_tensor(args.out, s0)
    _emit(command="undersample", out=args.out, shape=list(s0.shape), sigma2=args.sigma2)
    return 0


def _model_config(cfg: RunConfig) -> CascadeConfig:
    kw = parse_arch(cfg.get("arch", "D5-C5"))
    for key in ("n_f", "kernel_size", "dynamic", "dc_mode", "lam", "train_lambda", "ds_boundary", "dtype", "seed"):
        if key in cfg:
            kw[key] = cfg[key]
    return CascadeConfig(**kw)


def _train_config(cfg: RunConfig, checkpoint: str) -> TrainConfig:
    kw = {k: cfg[k] for k in ("lr", "beta1", "beta2", "weight_decay", "batch", "iters", "acc", "noise_range", "patch_width", "eval_every", "checkpoint_every", "seed") if k in cfg}
    if cfg.get("augment", False):
        kw["aug"] = AugConfig(translate_px=cfg.get("translate_px", 20))
    return TrainConfig(checkpoint_path=checkpoint, **kw)


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    seqs = _load_dir(args.data_dir)
    n_test = cfg.get("n_test", 0)
    if n_test >= len(seqs):
        raise UsageError(f"n_test={n_test} leaves no training data ({len(seqs)} sequences)")
    train_set, test_set = (seqs[:-n_test], seqs[-n_test:]) if n_test else (seqs, [])
    model = load_model(cfg["init_model"]) if "init_model" in cfg else build(_model_config(cfg))
    tcfg = _train_config(cfg, args.out_model)
    trainer = Trainer(model, tcfg, cfg.get("n_central", 8))
    result = trainer.fit(train_set, test_set or None)
    save_model(model, args.out_model)
    if args.log:
        result.write_csv(args.log)
    last = result.curve[-1] if result.curve else (tcfg.iters, None, None)
    _emit(command="train", model=args.out_model, arch=model.name, params=count_params(model), steps=tcfg.iters, train_mse=last[1], test_mse=last[2])
    return 0


def cmd_reconstruct(args) -> int:
    model = load_model(args.model)
    s0 = _read(args.kspace).astype(np.complex128)
    if s0.ndim not in (3, 4):
        raise ShapeError(f"k-space must be (n_x, n_y, n_t) or batched, got {s0.shape}")
    mask = _read_mask(args.mask, s0.shape)
    out, stages = reconstruct(model, s0, mask, return_stages=True)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("reconstruction contains non-finite values")
    write_tensor(args.out, out)
    if args.stages_dir:
        d = Path(args.stages_dir)
        d.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(stages):
            write_tensor(d / f"stage{i + 1:02d}{TENSOR_SUFFIX}", s)
    _emit(command="reconstruct", out=args.out, arch=model.name, shape=list(out.shape), stages=len(stages) if args.stages_dir else 0)
    return 0


def cmd_eval(args) -> int:
    rec, gnd = _read(args.recon), _read(args.gnd)
    if rec.shape != gnd.shape:
        raise ShapeError(f"reconstruction {rec.shape} and reference {gnd.shape} differ in shape")
    report = evaluate(_sequences(rec), _sequences(gnd))
    if args.report:
        text = report.to_csv() if args.report.endswith(".csv") else report.to_text()
        Path(args.report).write_text(text)
    sys.stderr.write(report.to_text())
    _emit(command="eval", **report.summary())
    return 0


def _parse_dims(text: str) -> tuple:
    try:
        dims = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--dims must look like 8x8x4, got {text!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise UsageError(f"--dims must give three positive sizes, got {text!r}")
    return dims


def cmd_gradcheck(args) -> int:
    dims = _parse_dims(args.dims)
    kw = parse_arch(args.arch)
    cfg = CascadeConfig(n_f=args.n_f, dc_mode=args.dc_mode, train_lambda=args.train_lambda, dtype="float64", seed=args.seed, **kw)
    model = build(cfg)
    n = count_params(model)
    if n > GRADCHECK_MAX_PARAMS:
        raise UsageError(f"{cfg.name} with n_f={args.n_f} has {n} parameters; gradient checks are limited to {GRADCHECK_MAX_PARAMS}")
    x, s0, mask = random_problem(dims, args.batch, args.seed)
    res = check_gradients(model, x, s0, mask)
    ok = res.passed(args.tol)
    for group, err in res.errors.items():
        sys.stderr.write(f"{group:8s} {'n/a' if err is None else f'{err:.3e}'}\n")
    errors = {g: ("n/a" if e is None else e) for g, e in res.errors.items()}
    _emit(command="gradcheck", arch=cfg.name, params=n, checked=res.n_checked, tol=args.tol, passed=ok, **errors)
    return 0 if ok else 1


def cmd_render(args) -> int:
    from PIL import Image

    x = _read(getattr(args, "in"))
    if x.ndim == 2:
        x = x[..., None]
    if x.ndim != 3:
        raise ShapeError(f"render expects (n_x, n_y, n_t), got {x.shape}")
    ref = None
    if args.ref:
        ref = _read(args.ref)
        if ref.ndim == 2:
            ref = ref[..., None]
        if ref.shape != x.shape:
            raise ShapeError(f"image {x.shape} and reference {ref.shape} differ in shape")
    if args.profile_y is not None:
        if not 0 <= args.profile_y < x.shape[1]:
            raise UsageError(f"--profile-y {args.profile_y} outside 0..{x.shape[1] - 1}")
        prof = temporal_profile(x, args.profile_y, ref)
        img = prof[1] if ref is not None else np.abs(prof)
        view = "profile"
    else:
        if not 0 <= args.frame < x.shape[2]:
            raise UsageError(f"--frame {args.frame} outside 0..{x.shape[2] - 1}")
        img = np.abs(x[..., args.frame] - ref[..., args.frame]) if ref is not None else np.abs(x[..., args.frame])
        view = "error" if ref is not None else "magnitude"
    img = np.asarray(img, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    scaled = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    Image.fromarray(np.round(255 * scaled).astype(np.uint8)).save(args.out, format="PNG")
    _emit(command="render", out=args.out, view=view, shape=list(img.shape), min=lo, max=hi)
    return 0


# -- parser ---------------------------------------------------------------------


def _positive_float(text: str) -> float:
    v = float(text)
    if not math.isfinite(v) or v < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative number, got {text!r}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deepcascade", description="Cascaded CNN reconstruction of undersampled dynamic MRI.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="synthesise phantom sequences")
    s.add_argument("--spec", help="key=value file with n_x, n_y, n_t, pulsation, drift, period, count, seed")
    s.add_argument("--out", required=True, help="output file, or directory when count > 1")
    s.add_argument("--count", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("mask", help="variable-density Cartesian mask")
    s.add_argument("--ny", type=int, required=True)
    s.add_argument("--nt", type=int, required=True)
    s.add_argument("--acc", type=float, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--n-central", type=int, default=8)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mask)

    s = sub.add_parser("undersample", help="simulate an acquisition")
    s.add_argument("--in", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--sigma2", type=_positive_float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_undersample)

    s = sub.add_parser("train", help="train a cascade")
    s.add_argument("--config", required=True)
    s.add_argument("--data-dir", required=True)
    s.add_argument("--out-model", required=True)
    s.add_argument("--log", help="CSV learning curve")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("reconstruct", help="apply a trained cascade")
    s.add_argument("--model", required=True)
    s.add_argument("--kspace", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--stages-dir", help="also write every subnetwork's output here")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("eval", help="error report against reference images")
    s.add_argument("--recon", required=True)
    s.add_argument("--gnd", required=True)
    s.add_argument("--report", help="CSV if the name ends in .csv, text otherwise")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of model gradients")
    s.add_argument("--arch", default="D2-C2")
    s.add_argument("--dims", default="8x8x4")
    s.add_argument("--tol", type=_positive_float, default=1e-4)
    s.add_argument("--n-f", type=int, default=4)
    s.add_argument("--batch", type=int, default=2)
    s.add_argument("--dc-mode", choices=("hard", "soft"), default="hard")
    s.add_argument("--train-lambda", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("render", help="PNG of a frame, error map or temporal profile")
    s.add_argument("--in", required=True)
    s.add_argument("--out", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--frame", type=int, default=0)
    g.add_argument("--profile-y", type=int)
    s.add_argument("--ref", help="reference sequence; renders the absolute error")
    s.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as err:
        code, msg = EXIT_USAGE, err
    except (FormatError, ModelFormatError) as err:
        code, msg = EXIT_FORMAT, err
    except OSError as err:
        code, msg = EXIT_FORMAT, err
    except ShapeError as err:
        code, msg = EXIT_SHAPE, err
    except FloatingPointError as err:
        code, msg = EXIT_NUMERIC, err
    except ValueError as err:
        code, msg = EXIT_USAGE, err
    sys.stderr.write(f"deepcascade {args.command}: {msg}\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
