"""Command-line entry point.

Subcommands: summary, forward, save-init, bench, scaling, compare,
gradcheck, train-toy.  Every run prints the resolved configuration, is
deterministic under --seed (timing fields aside), and exits with 0 on
success, 1 on usage errors, 2 on numeric-check failures, 3 on I/O errors.
The RFK_SEED environment variable is the --seed fallback.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import model as model_mod
from .attention import flop_count_attention
from .gradcheck import PROBES, build_probe
from .graph import finite_diff_check
from .model import (Model, TrainingDivergedError, VariantConfig, build_variant,
                    config_from_lines, config_to_lines, cost_report,
                    count_params, make_toy_batch, predict_logits, stage_table,
                    toy_config, train_toy)
from .tensor import Rng, ShapeError, Tensor
from .weights import WeightsError, load_weights, save_weights

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_IO = 3


class UsageError(Exception):
    pass


class PpmError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; the contract wants 1
        raise UsageError(message)


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("RFK_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as e:
            raise UsageError(f"RFK_SEED must be an integer, got {env!r}") from e
    return 0


def _print_config(cfg: VariantConfig, extra: dict) -> None:
    print("resolved config:")
    for line in config_to_lines(cfg):
        print(f"  {line}")
    for k in sorted(extra):
        print(f"  {k}={extra[k]}")


def _config_from_args(args, default_variant: str = "b1") -> VariantConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} does not exist")
        try:
            cfg = config_from_lines(path.read_text().splitlines())
        except ValueError as e:
            raise UsageError(f"bad config file {path}: {e}") from e
    else:
        variant = getattr(args, "variant", None) or default_variant
        if variant.lower() in ("b1", "b2", "b3"):
            cfg = VariantConfig.preset(variant)
        else:
            raise UsageError(f"unknown variant {variant!r} (b1/b2/b3 or --config)")
    overrides = {}
    if getattr(args, "res", None):
        overrides["input_resolution"] = args.res
    if getattr(args, "eps", None) is not None:
        overrides["eps"] = args.eps
    if getattr(args, "scales", None) is not None:
        overrides["scales"] = args.scales
    if getattr(args, "kernels", None):
        overrides["dw_kernels"] = tuple(_int_list(args.kernels))
    if overrides:
        cfg = cfg.override(**overrides)
    return cfg


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v != ""]
    except ValueError as e:
        raise UsageError(f"expected a comma-separated integer list, got {text!r}") from e


def read_ppm(path) -> np.ndarray:
    """Binary PPM (P6) to a (1, 3, H, W) float32 array in [0, 1]."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise PpmError(f"cannot read image {path}: {e}") from e
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PpmError(f"{path}: truncated PPM header")
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise PpmError(f"{path}: not a binary PPM (P6) file")
    try:
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError as e:
        raise PpmError(f"{path}: bad PPM header") from e
    if not (0 < maxval < 256):
        raise PpmError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    raw = data[pos:pos + 3 * w * h]
    if len(raw) != 3 * w * h:
        raise PpmError(f"{path}: expected {3 * w * h} pixel bytes, got {len(raw)}")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).astype(np.float32) / maxval
    return img.transpose(2, 0, 1)[None]


def _write_text(path, text: str) -> None:
    Path(path).write_text(text)
    print(f"wrote {path}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_summary(args) -> int:
    cfg = _config_from_args(args, default_variant=args.variant or "b1")
    seed = _resolve_seed(args)
    res = args.res or cfg.input_resolution
    _print_config(cfg, {"seed": seed, "resolution": res})
    m = build_variant(cfg, Rng(seed))
    rows = stage_table(m, res)
    rep = cost_report(m, res)
    header = f"{'stage':<8}{'blocks':>7}{'ch':>6}{'out':>10}{'params':>12}{'macs':>14}"
    print(header)
    for r in rows:
        out = f"{r['out_hw'][0]}x{r['out_hw'][1]}"
        print(f"{r['stage']:<8}{r['blocks']:>7}{r['channels']:>6}{out:>10}"
              f"{r['params']:>12}{r['macs']:>14}")
    print(f"total params {rep.params} ({rep.params / 1e6:.2f}M)  "
          f"macs {rep.macs} ({rep.macs / 1e9:.3f}G)  "
          f"ew_flops {rep.ew_flops} ({rep.ew_flops / 1e9:.3f}G)")
    if args.out:
        payload = {"params": rep.params, "macs": rep.macs, "ew_flops": rep.ew_flops,
                   "resolution": res,
                   "stages": [{**r, "out_hw": list(r["out_hw"])} for r in rows]}
        _write_text(args.out, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_forward(args) -> int:
    seed = _resolve_seed(args)
    if args.weights:
        m = load_weights(args.weights)
        cfg = m.config
        if args.res and args.res != cfg.input_resolution:
            cfg = cfg.override(input_resolution=args.res)
            m = Model(cfg, m.parameters, m.topology, m.stage_of, m.dtype)
    else:
        cfg = _config_from_args(args)
        m = build_variant(cfg, Rng(seed))
    res = cfg.input_resolution
    _print_config(cfg, {"seed": seed, "batch": args.batch, "resolution": res,
                        "image": args.image or "<random>"})
    if args.image:
        img = read_ppm(args.image)
        if img.shape[2] != res or img.shape[3] != res:
            raise UsageError(
                f"image is {img.shape[2]}x{img.shape[3]} but the model expects {res}x{res}")
        x = Tensor(np.repeat(img, args.batch, axis=0))
    else:
        x = Rng(seed + 1).tensor((args.batch, 3, res, res))
    logits = predict_logits(m, x)
    lines = [",".join(f"{float(v):.9g}" for v in row) for row in logits]
    text = "\n".join(lines) + "\n"
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_save_init(args) -> int:
    cfg = _config_from_args(args)
    seed = _resolve_seed(args)
    _print_config(cfg, {"seed": seed})
    m = build_variant(cfg, Rng(seed))
    save_weights(m, args.out)
    print(f"wrote {args.out} ({count_params(m)} parameters)")
    return EXIT_OK


def cmd_bench(args) -> int:
    seed = _resolve_seed(args)
    spec = bench_mod.BenchSpec(
        target=args.target, b=args.batch, d=args.d, n=args.n,
        variant=args.variant or "b1", resolution=args.res,
        repeats=args.repeats, warmup=args.warmup, threads=args.threads, seed=seed)
    cfg = VariantConfig.preset(spec.variant) if spec.target == "model" else None
    if cfg is not None:
        _print_config(cfg, {"seed": seed, "target": spec.target})
    else:
        print("resolved config:")
        for k in ("target", "b", "d", "n", "repeats", "warmup", "threads"):
            print(f"  {k}={getattr(spec, k)}")
        print(f"  seed={seed}")
    row = bench_mod.run_bench(spec)
    print(bench_mod.format_table([row]))
    if args.out:
        text = (bench_mod.rows_to_json([row]) if args.format == "json"
                else bench_mod.rows_to_csv([row]))
        _write_text(args.out, text)
    return EXIT_OK


def cmd_scaling(args) -> int:
    seed = _resolve_seed(args)
    n_list = _int_list(args.n)
    d_list = _int_list(args.d)
    if len(n_list) > 1 and len(d_list) > 1:
        raise UsageError("sweep exactly one of --n / --d")
    if len(n_list) > 1 or (len(n_list) == 1 and len(d_list) == 1 and args.axis == "n"):
        axis, sweep, fixed_d, fixed_n = "n", n_list, d_list[0], n_list[0]
    elif len(d_list) >= 1:
        axis, sweep, fixed_d, fixed_n = "d", d_list, d_list[0], n_list[0]
    else:
        raise UsageError("provide --n and/or --d")
    print("resolved config:")
    for k, v in (("target", args.target), ("axis", axis),
                 ("sweep", ",".join(map(str, sweep))), ("d", fixed_d),
                 ("n", fixed_n), ("batch", args.batch),
                 ("repeats", args.repeats), ("seed", seed)):
        print(f"  {k}={v}")
    result = bench_mod.scaling_study(
        args.target, sweep, axis=axis, d=fixed_d, n=fixed_n, b=args.batch,
        repeats=args.repeats, warmup=args.warmup, seed=seed)
    print(bench_mod.format_table(result.rows))
    if result.slope is None:
        print("slope: n/a (single point)")
    else:
        print(f"fitted log-log flops slope vs {axis}: {result.slope:.4f}")
    if args.out:
        if args.format == "json":
            payload = {"axis": axis, "slope": result.slope,
                       "rows": [r.as_dict() for r in result.rows]}
            _write_text(args.out, json.dumps(payload, indent=2, sort_keys=True) + "\n")
        else:
            _write_text(args.out, bench_mod.rows_to_csv(result.rows))
    return EXIT_OK


def cmd_compare(args) -> int:
    seed = _resolve_seed(args)
    print("resolved config:")
    for k, v in (("d", args.d), ("n", args.n), ("batch", args.batch),
                 ("repeats", args.repeats), ("seed", seed)):
        print(f"  {k}={v}")
    record = bench_mod.compare_attention(args.d, args.n, b=args.batch,
                                         repeats=args.repeats, seed=seed)
    rf_rep = flop_count_attention("reduceformer", args.batch, args.d, args.n)
    eq1_rep = flop_count_attention("relu_linear", args.batch, args.d, args.n)
    print(f"flops: reduction={rf_rep.total_flops} baseline={eq1_rep.total_flops} "
          f"ratio={record['flop_ratio_eq1_over_rf']:.3f}")
    print(f"median_ms: reduction={record['median_ms_rf']:.6g} "
          f"baseline={record['median_ms_eq1']:.6g}")
    if not record["rf_faster"]:
        print("warning: reduction attention was not faster on this machine/shape")
    if args.out:
        _write_text(args.out, json.dumps(record, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = _resolve_seed(args)
    names = list(PROBES) if args.op == "all" else [args.op]
    print("resolved config:")
    for k, v in (("op", args.op), ("d", args.d), ("n", args.n),
                 ("tol", args.tol), ("seed", seed)):
        print(f"  {k}={v}")
    worst = 0.0
    failed = False
    for name in names:
        f, x = build_probe(name, d=args.d, n=args.n, seed=seed)
        err = finite_diff_check(f, x)
        ok = err < args.tol
        failed |= not ok
        worst = max(worst, err)
        print(f"op {name}: max_rel_err={err:.3e} tol={args.tol:g} "
              f"{'PASS' if ok else 'FAIL'}")
    print(f"worst: {worst:.3e}")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_train_toy(args) -> int:
    seed = _resolve_seed(args)
    cfg = toy_config(classes=args.classes, resolution=args.res)
    _print_config(cfg, {"seed": seed, "steps": args.steps, "lr": args.lr,
                        "batch": args.batch})
    m = build_variant(cfg, Rng(seed))
    data = make_toy_batch(args.batch, args.classes, args.res, seed=seed + 1)
    trace = train_toy(m, data, steps=args.steps, lr=args.lr)
    text = "step,loss\n" + "".join(f"{i},{v:.9g}\n" for i, v in enumerate(trace))
    if args.out:
        _write_text(args.out, text)
    ratio = trace[-1] / trace[0] if trace[0] != 0 else float("inf")
    ok = ratio < 0.1
    print(f"initial={trace[0]:.6g} final={trace[-1]:.6g} ratio={ratio:.4f} "
          f"{'PASS' if ok else 'FAIL'} (target ratio < 0.1)")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> _Parser:
    p = _Parser(prog="reduceformer",
                description="Reduction-attention model kit: build, inspect, "
                            "benchmark, gradient-check, and toy-train.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, res=True):
        sp.add_argument("--seed", type=int, default=None,
                        help="RNG seed (default: $RFK_SEED or 0)")
        if res:
            sp.add_argument("--res", type=int, default=None, help="input resolution")

    sp = sub.add_parser("summary", help="per-stage table with params and MACs")
    sp.add_argument("--variant", default=None, help="b1/b2/b3")
    sp.add_argument("--config", default=None, help="key=value config file")
    sp.add_argument("--out", default=None, help="also write a JSON report")
    common(sp)
    sp.set_defaults(func=cmd_summary)

    sp = sub.add_parser("forward", help="run a forward pass, write logits CSV")
    sp.add_argument("--variant", default=None)
    sp.add_argument("--config", default=None)
    sp.add_argument("--weights", default=None, help="load a saved weight file")
    sp.add_argument("--random-init", action="store_true",
                    help="random parameters (default when no --weights)")
    sp.add_argument("--image", default=None, help="binary PPM (P6) input")
    sp.add_argument("--random", action="store_true", help="random input (default)")
    sp.add_argument("--batch", type=int, default=1)
    sp.add_argument("--out", default=None, help="logits CSV path (default stdout)")
    common(sp)
    sp.set_defaults(func=cmd_forward)

    sp = sub.add_parser("save-init", help="save a freshly initialized model")
    sp.add_argument("--variant", default=None)
    sp.add_argument("--config", default=None)
    sp.add_argument("--out", required=True, help="weight file path")
    common(sp)
    sp.set_defaults(func=cmd_save_init)

    sp = sub.add_parser("bench", help="time one target with op counts")
    sp.add_argument("--target", required=True, help="rf | eq1 | model")
    sp.add_argument("--d", type=int, default=64)
    sp.add_argument("--n", type=int, default=196)
    sp.add_argument("--variant", default=None)
    sp.add_argument("--batch", type=int, default=1)
    sp.add_argument("--repeats", type=int, default=20)
    sp.add_argument("--warmup", type=int, default=3)
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--out", default=None)
    sp.add_argument("--format", choices=("csv", "json"), default="csv")
    common(sp)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("scaling", help="sweep N or d, fit the flops slope")
    sp.add_argument("--target", required=True, help="rf | eq1")
    sp.add_argument("--n", default="196", help="token count or comma list")
    sp.add_argument("--d", default="64", help="channel dim or comma list")
    sp.add_argument("--axis", choices=("n", "d"), default="n",
                    help="sweep axis when both flags are single values")
    sp.add_argument("--batch", type=int, default=1)
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--warmup", type=int, default=1)
    sp.add_argument("--out", default=None)
    sp.add_argument("--format", choices=("csv", "json"), default="json")
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_scaling)

    sp = sub.add_parser("compare", help="both attentions on one bundle")
    sp.add_argument("--d", type=int, default=64)
    sp.add_argument("--n", type=int, default=196)
    sp.add_argument("--batch", type=int, default=1)
    sp.add_argument("--repeats", type=int, default=50)
    sp.add_argument("--out", default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("gradcheck", help="reverse-mode vs finite differences")
    sp.add_argument("--op", default="all", choices=["all"] + sorted(PROBES))
    sp.add_argument("--d", type=int, default=8)
    sp.add_argument("--n", type=int, default=16)
    sp.add_argument("--tol", type=float, default=1e-5)
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("train-toy", help="overfit a tiny fixed batch")
    sp.add_argument("--steps", type=int, default=200)
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--batch", type=int, default=16)
    sp.add_argument("--classes", type=int, default=8)
    sp.add_argument("--out", default=None, help="loss trace CSV")
    sp.add_argument("--res", type=int, default=16)
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_train_toy)

    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ShapeError, ValueError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (WeightsError, PpmError, OSError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
