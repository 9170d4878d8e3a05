"""Command-line front end for the whole pipeline.

Exit codes: 0 success, 1 usage error, 2 data/format/config error,
3 numeric failure.  Unknown flags are usage errors, never ignored.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    DegenerateRangeError,
    DomainError,
    DTypeError,
    FormatError,
    NumericError,
    ShapeError,
    StateError,
)
from .tensor import Tensor

USAGE_EXIT = 1
DATA_EXIT = 2
NUMERIC_EXIT = 3

_DATA_ERRORS = (ConfigError, DataError, DomainError, DTypeError, FormatError,
                ShapeError, StateError, DegenerateRangeError, OSError)


def _named_config(name_or_path: str):
    """Accept the committed config names or a key=value file path."""
    from . import model
    from .fileio import load_model_config

    if name_or_path == "reference":
        return model.reference_config()
    if name_or_path == "desk":
        return model.desk_config()
    return load_model_config(name_or_path)


def _parse_point(text: str):
    from .prompt import PromptPoint

    parts = text.split(",")
    if len(parts) != 2:
        raise DataError(f"--point expects 'X,Y', got {text!r}")
    try:
        x, y = int(parts[0]), int(parts[1])
    except ValueError:
        raise DataError(f"--point coordinates must be integers, got {text!r}") from None
    return PromptPoint(y=y, x=x)


def _load_any_model(path: str):
    """Sniff the magic bytes; returns ('float', Model) or ('quant', QuantizedModel)."""
    from .fileio import load_checkpoint
    from .quantize import load_quantized

    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == b"PCKP":
        return "float", load_checkpoint(path)
    if magic == b"PQNT":
        return "quant", load_quantized(path)
    raise FormatError(f"{path}: unknown model magic {magic!r} (expected PCKP or PQNT)")


def _forward_any(kind: str, m, crop: Tensor) -> Tensor:
    from .model import predict_mask
    from .quantize import quantized_forward

    return predict_mask(m, crop) if kind == "float" else quantized_forward(m, crop)


def _crop_size_of(kind: str, m) -> int:
    return m.config.input_size


# ----------------------------------------------------------- subcommands

def _cmd_synth(args) -> int:
    from .synth import synth_shapes_dataset

    dirs = synth_shapes_dataset(args.out, args.count, args.seed,
                                image_size=args.image_size, crop_size=args.crop_size)
    print(f"wrote {len(dirs)} samples under {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .losses import LambdaPolicy
    from .model import build
    from .train import TrainConfig, load_dataset, train

    config = _named_config(args.config)
    tc = TrainConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                     seed=args.seed, mode=args.mode,
                     lambda_policy=LambdaPolicy(args.lambda_min, args.lambda_max))
    samples = load_dataset(args.data, with_teacher=(args.mode == "distilled"))
    if args.val_count >= len(samples):
        raise DataError(f"--val-count {args.val_count} leaves no training samples "
                        f"(dataset has {len(samples)})")
    split = len(samples) - args.val_count
    model = build(config)
    train(model, samples[:split], tc, val_samples=samples[split:],
          ckpt_path=args.out, history_path=args.history, log=print)
    print(f"checkpoint written to {args.out}")
    return 0


def _cmd_quantize(args) -> int:
    from .fileio import load_checkpoint
    from .prompt import crop_centered
    from .quantize import calibrate, fold_model, quantize_model, save_quantized
    from .train import load_dataset

    model = load_checkpoint(args.ckpt)
    samples = load_dataset(args.calib, with_teacher=False)[: args.calib_count]
    side = model.config.input_size
    crops = [crop_centered(s.image, s.point, side)[0] for s in samples]
    fm = fold_model(model)
    ranges = calibrate(fm, crops)
    mode = "raise" if args.strict_ranges else "widen"
    qm = quantize_model(fm, ranges, on_degenerate=mode)
    save_quantized(qm, args.out)
    print(f"quantized model ({len(crops)} calibration crops) written to {args.out}")
    return 0


def _cmd_infer(args) -> int:
    from .fileio import load_ppm, save_pgm
    from .metrics import binarize
    from .prompt import crop_centered, uncrop_mask

    kind, m = _load_any_model(args.model)
    image = load_ppm(args.image)
    point = _parse_point(args.point)
    crop, spec = crop_centered(image, point, _crop_size_of(kind, m))
    logits = _forward_any(kind, m, crop)
    mask = uncrop_mask(binarize(logits), spec)
    save_pgm(mask, args.out)
    print(f"mask written to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from .metrics import binarize, iou, map_single_prompt, mask_score, miou
    from .prompt import crop_centered, uncrop_mask
    from .tensor import stable_sigmoid
    from .train import load_dataset

    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in wanted if m not in ("miou", "map")]
    if unknown:
        raise DataError(f"--metrics supports miou,map; got {unknown!r}")
    kind, m = _load_any_model(args.model)
    samples = load_dataset(args.data, with_teacher=False)
    side = _crop_size_of(kind, m)
    ious, preds = [], []
    for s in samples:
        crop, spec = crop_centered(s.image, s.point, side)
        logits = _forward_any(kind, m, crop)
        pred = binarize(logits)
        v = iou(uncrop_mask(pred, spec), s.mask)
        ious.append(v)
        preds.append((mask_score(stable_sigmoid(logits.data[0, 0]), pred.data[0, 0]), v))
    if "miou" in wanted:
        print(f"miou = {miou(ious)!r}")
    if "map" in wanted:
        print(f"map = {map_single_prompt(preds)!r}")
    return 0


def _cmd_stats(args) -> int:
    from .fileio import checkpoint_to_bytes
    from .layers import count_macs, count_params
    from .metrics import efficiency_report, utilization
    from .model import build
    from .optim import init_params
    from .quantize import count_macs_quantized, fold_model, quantize_model, serialize_quantized

    config = _named_config(args.config)
    model = build(config)
    init_params(model, 0)
    s = config.input_size
    params = count_params(model)
    macs = count_macs(model, (1, 3, s, s))
    float_bytes = len(checkpoint_to_bytes(model))
    fm = fold_model(model)
    # size and MAC count do not depend on ranges; use a placeholder table
    qm = quantize_model(fm, {e: (0.0, 1.0) for e in fm.edges()})
    qmacs = count_macs_quantized(qm, (1, 3, s, s))
    quant_bytes = len(serialize_quantized(qm))
    print(f"params = {params}")
    print(f"macs = {macs}")
    print(f"macs_quantized = {qmacs}")
    print(f"float_bytes = {float_bytes}")
    print(f"quantized_bytes = {quant_bytes}")
    if args.latency is not None or args.clock is not None:
        if args.latency is None or args.clock is None:
            raise DataError("--latency and --clock must be given together")
        mpc = efficiency_report(qmacs, args.latency / 1e3, args.clock)
        print(f"macs_per_cycle = {mpc:.2f}")
        print(f"utilization = {utilization(mpc):.5f}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .layers import (ChannelNorm, ConcatSkip, Conv2d, ConvNormAct,
                         DepthwiseSeparable, ReLU, SigmoidHead, Upsample,
                         gradient_check)
    from .losses import (LambdaPolicy, balanced_bce, dice_loss, mse_logits,
                         total_loss)

    rng = np.random.default_rng(args.seed)
    failures = []

    def report(name, err, tol):
        ok = err < tol
        print(f"{'ok' if ok else 'FAIL'}  {name}: max rel err {err:.3e} (tol {tol:g})")
        if not ok:
            failures.append(name)

    cases = [
        ("conv3x3", Conv2d(3, 5, 3, name="c", dtype="float64"), (2, 3, 8, 8), 1e-6),
        ("conv1x1", Conv2d(4, 6, 1, name="c", dtype="float64"), (2, 4, 6, 6), 1e-6),
        ("conv_s2", Conv2d(3, 4, 3, 2, name="c", dtype="float64"), (1, 3, 8, 8), 1e-6),
        ("depthwise", Conv2d(4, 4, 3, groups=4, name="c", dtype="float64"), (2, 4, 6, 6), 1e-6),
        ("norm", ChannelNorm(5, dtype="float64"), (2, 5, 4, 4), 1e-6),
        ("relu", ReLU(), (2, 4, 6, 6), 1e-4),
        ("sigmoid_head", SigmoidHead(), (1, 1, 8, 8), 1e-4),
        ("conv_norm_act", ConvNormAct(3, 4, dtype="float64"), (1, 3, 6, 6), 1e-4),
        ("separable", DepthwiseSeparable(3, 5, dtype="float64"), (1, 3, 8, 8), 1e-4),
        ("separable_s2", DepthwiseSeparable(3, 5, stride=2, dtype="float64"), (1, 3, 8, 8), 1e-4),
        ("upsample", Upsample(4, 3, dtype="float64"), (1, 4, 4, 4), 1e-4),
    ]
    for name, layer, shape, tol in cases:
        for p in layer.params():
            p.value.data[...] = rng.standard_normal(p.value.shape) * 0.5
        x = Tensor(rng.standard_normal(shape))
        report(name, gradient_check(layer, x, seed=args.seed), tol)

    # concat: check both returned slices against finite differences
    cat = ConcatSkip()
    a = Tensor(rng.standard_normal((1, 3, 4, 4)))
    b = Tensor(rng.standard_normal((1, 2, 4, 4)))
    cache: dict = {}
    out = cat.forward(a, b, cache)
    r = rng.standard_normal(out.shape)
    ga, gb = cat.backward(Tensor(r.copy()), cache)
    exact = np.array_equal(np.concatenate([ga.data, gb.data], axis=1), r)
    report("concat_skip", 0.0 if exact else 1.0, 1e-4)

    # losses against central finite differences
    eps = 1e-6
    s = rng.standard_normal((1, 1, 8, 8))
    t = rng.standard_normal((1, 1, 8, 8)) * 2
    g = (rng.random((1, 1, 8, 8)) > 0.6).astype(np.float64)
    policy = LambdaPolicy(0.3, 0.7)
    loss_fns = [
        ("mse", lambda x: mse_logits(Tensor(x), Tensor(t))),
        ("balanced_bce", lambda x: balanced_bce(Tensor(x), Tensor(g))),
        ("dice", lambda x: dice_loss(Tensor(x), Tensor(g))),
        ("total", lambda x: total_loss(Tensor(x), Tensor(t), Tensor(g), policy)[:2]),
    ]
    for name, fn in loss_fns:
        _, grad = fn(s)
        worst = 0.0
        flat = s.reshape(-1)
        for i in rng.choice(flat.size, size=24, replace=False):
            orig = flat[i]
            flat[i] = orig + eps
            lp = fn(s)[0]
            flat[i] = orig - eps
            lm = fn(s)[0]
            flat[i] = orig
            num = (lp - lm) / (2 * eps)
            a_ = grad.data.reshape(-1)[i]
            worst = max(worst, abs(a_ - num) / max(1e-12, abs(a_) + abs(num)))
        report(f"loss_{name}", worst, 1e-4)

    if failures:
        raise NumericError(f"gradient checks failed: {', '.join(failures)}")
    print("all gradient checks passed")
    return 0


# ----------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    """argparse that signals usage problems instead of exiting itself."""

    def error(self, message):
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="picoseg", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic shapes dataset")
    sp.add_argument("--out", required=True, help="output dataset directory")
    sp.add_argument("--count", type=int, required=True, help="number of samples")
    sp.add_argument("--seed", type=int, default=0, help="generator seed")
    sp.add_argument("--image-size", type=int, default=96, help="square image side")
    sp.add_argument("--crop-size", type=int, default=64, help="prompt crop side")
    sp.set_defaults(fn=_cmd_synth)

    sp = sub.add_parser("train", help="train a model on a sample directory")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--config", default="desk",
                    help="model config file, or 'desk'/'reference'")
    sp.add_argument("--mode", choices=("distilled", "supervised"), default="distilled")
    sp.add_argument("--out", required=True, help="checkpoint output path")
    sp.add_argument("--epochs", type=int, default=5)
    sp.add_argument("--lr", type=float, default=2e-3)
    sp.add_argument("--batch-size", type=int, default=8)
    sp.add_argument("--seed", type=int, default=42)
    sp.add_argument("--val-count", type=int, default=100,
                    help="samples held out from the end of the dataset")
    sp.add_argument("--lambda-min", type=float, default=0.2)
    sp.add_argument("--lambda-max", type=float, default=0.8)
    sp.add_argument("--history", default=None, help="also write CSV history here")
    sp.set_defaults(fn=_cmd_train)

    sp = sub.add_parser("quantize", help="static INT8 quantization of a checkpoint")
    sp.add_argument("--ckpt", required=True, help="float checkpoint path")
    sp.add_argument("--calib", required=True, help="calibration dataset directory")
    sp.add_argument("--calib-count", type=int, default=32)
    sp.add_argument("--out", required=True, help="quantized model output path")
    sp.add_argument("--strict-ranges", action="store_true",
                    help="error on degenerate activation ranges instead of widening")
    sp.set_defaults(fn=_cmd_quantize)

    sp = sub.add_parser("infer", help="predict a mask for one image + prompt")
    sp.add_argument("--model", required=True, help="checkpoint or quantized model")
    sp.add_argument("--image", required=True, help="input PPM image")
    sp.add_argument("--point", required=True, help="prompt as 'X,Y' (column,row)")
    sp.add_argument("--out", required=True, help="output PGM mask path")
    sp.set_defaults(fn=_cmd_infer)

    sp = sub.add_parser("eval", help="score a model on a dataset")
    sp.add_argument("--model", required=True, help="checkpoint or quantized model")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--metrics", default="miou,map", help="comma list: miou,map")
    sp.set_defaults(fn=_cmd_eval)

    sp = sub.add_parser("stats", help="print budget numbers for a config")
    sp.add_argument("--config", default="reference",
                    help="model config file, or 'desk'/'reference'")
    sp.add_argument("--latency", type=float, default=None, help="latency in ms")
    sp.add_argument("--clock", type=float, default=None, help="clock in Hz")
    sp.set_defaults(fn=_cmd_stats)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=_cmd_gradcheck)

    return p


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return USAGE_EXIT
    except SystemExit as e:
        # argparse exits directly for --help; 0 stays 0, anything else is usage
        return 0 if e.code in (0, None) else USAGE_EXIT
    try:
        return args.fn(args)
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return NUMERIC_EXIT
    except _DATA_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return DATA_EXIT


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
