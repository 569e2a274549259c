"""``carafe`` command line: cost-table, gradcheck, train, compare, visualize,
selftest.

Exit codes: 0 success, 1 check or training failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from importlib import resources

from .baselines import TABLE_KINDS, UpsamplerKind
from .carafe import CarafeConfig, CarafeParams
from .errors import CarafeError, ConfigError, TrainingDiverged

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _default_seed() -> int:
    raw = os.environ.get("CARAFE_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"CARAFE_SEED must be an integer, got {raw!r}") from None


def _echo_config(args, out=None) -> None:
    out = out or sys.stdout
    for key, value in sorted(vars(args).items()):
        if key != "func":
            print(f"# {key}={value}", file=out)


def _parse_kinds(text: str | None):
    if not text:
        return list(TABLE_KINDS)
    try:
        return [UpsamplerKind.parse(k) for k in text.split(",") if k.strip()]
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _parse_c_mid(text: str, channels: int):
    if text is None:
        return min(64, channels)
    if text.lower() in ("none", "n/a"):
        return None
    return int(text)


def _carafe_cfg(args, channels: int, sigma: int) -> CarafeConfig:
    try:
        return CarafeConfig(channels, sigma=sigma, k_up=args.k_up, k_encoder=args.k_encoder,
                            c_mid=_parse_c_mid(args.c_mid, channels))
    except (ConfigError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _add_carafe_flags(p, k_up=5, k_encoder=3, c_mid=None):
    p.add_argument("--k-up", type=int, default=k_up)
    p.add_argument("--k-encoder", type=int, default=k_encoder)
    p.add_argument("--c-mid", default=c_mid,
                   help="compressed channels; 'none' removes the compressor "
                        "(default: min(64, channels))")


# --------------------------------------------------------------------------
# cost-table
# --------------------------------------------------------------------------

def cmd_cost_table(args) -> int:
    from .cost import cost_table

    kinds = _parse_kinds(args.kinds)
    cfg = _carafe_cfg(args, args.channels, args.sigma)
    try:
        text = cost_table(args.channels, args.sigma, kinds, cfg)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    if args.out:
        with open(args.out, "w", newline="") as f:
            f.write(text)
    sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# gradcheck
# --------------------------------------------------------------------------

def _parse_configs(text):
    configs = []
    for chunk in text.split(";"):
        if not chunk.strip():
            continue
        try:
            s, k_up, k_enc = (int(v) for v in chunk.split(","))
        except ValueError:
            raise UsageError(f"bad config {chunk!r}; expected sigma,k_up,k_encoder") from None
        configs.append((s, k_up, k_enc))
    return configs


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite, worst_by_op

    configs = _parse_configs(args.configs)
    try:
        results = run_suite(range(args.seed, args.seed + args.seeds), configs,
                            args.max_entries)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    print(f"{'op':<48}{'worst rel err':>16}  status")
    for op, r in worst_by_op(results).items():
        status = "PASS" if r.worst < args.tolerance else "FAIL"
        print(f"{op:<48}{r.worst:>16.3e}  {status}")
    failures = [r for r in results if r.worst >= args.tolerance]
    if failures:
        print(f"{len(failures)} checks at or above tolerance {args.tolerance:g}:")
        for r in failures:
            print(f"  {r.op} {r.tensor} seed={r.seed} index={r.worst_index} "
                  f"rel_err={r.worst:.3e}")
        return EXIT_FAIL
    print(f"all {len(results)} checks below tolerance {args.tolerance:g}")
    return EXIT_OK


# --------------------------------------------------------------------------
# train / compare
# --------------------------------------------------------------------------

def _bench_configs(args):
    from .bench import ToyTaskSpec, TrainConfig

    try:
        spec = ToyTaskSpec(image_size=args.image_size, n_train=args.n_train,
                           n_eval=args.n_eval, pattern=args.pattern, seed=args.seed,
                           noise_std=args.noise_std)
        cfg = TrainConfig(lr=args.lr, momentum=args.momentum, epochs=args.epochs,
                          batch_size=args.batch_size, seed=args.seed,
                          clip_norm=args.clip_norm or None,
                          channels=args.channels, k_up=args.k_up,
                          k_encoder=args.k_encoder,
                          c_mid=_parse_c_mid(args.c_mid, args.channels))
    except (ConfigError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return spec, cfg


def _run_compare(args, kinds, n_seeds) -> int:
    from .bench import compare

    spec, cfg = _bench_configs(args)
    try:
        result = compare(kinds, spec, cfg, n_seeds)
    except TrainingDiverged as exc:
        print(f"training diverged at epoch {exc.epoch}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    text = result.to_csv(include_time=args.timing)
    if args.out:
        with open(args.out, "w", newline="") as f:
            f.write(text)
    print(result.summary_table())
    return EXIT_OK


def cmd_train(args) -> int:
    from .bench import build_model, gen_task, train

    kind = _parse_kinds(args.kind)[0]
    if args.save_params and kind is not UpsamplerKind.CARAFE:
        raise UsageError("--save-params is only meaningful for --kind carafe")
    if not args.save_params:
        return _run_compare(args, [kind], 1)
    spec, cfg = _bench_configs(args)
    model = build_model(kind, cfg)
    try:
        result = train(model, gen_task(spec, "train"), cfg, gen_task(spec, "eval"))
    except TrainingDiverged as exc:
        print(f"training diverged at epoch {exc.epoch}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    model.up.carafe_params().save(args.save_params, model.up.cfg)
    from .bench import Comparison

    comp = Comparison(spec, cfg, [result])
    if args.out:
        with open(args.out, "w", newline="") as f:
            f.write(comp.to_csv(include_time=args.timing))
    print(comp.summary_table())
    return EXIT_OK


def cmd_compare(args) -> int:
    return _run_compare(args, _parse_kinds(args.kinds), args.seeds)


# --------------------------------------------------------------------------
# visualize
# --------------------------------------------------------------------------

def _parse_points(values):
    points = []
    for v in values or ():
        try:
            y, x = (int(t) for t in v.split(","))
        except ValueError:
            raise UsageError(f"--at expects y,x, got {v!r}") from None
        points.append((y, x))
    return points


def cmd_visualize(args) -> int:
    from .tensor import make_rng, read_tensor
    from .viz import (
        accumulated_map, kernel_at_target, run_levels, save_accumulated_map,
        save_kernel_heatmap,
    )

    if args.level_count < 1:
        raise UsageError("--level-count must be >= 1")
    rng = make_rng(args.seed)
    if args.params:
        params, cfg = CarafeParams.load(args.params)
    else:
        cfg = _carafe_cfg(args, args.channels, 2)
        params = CarafeParams.init(cfg, rng)
    if args.input:
        x = read_tensor(args.input)
        if x.ndim != 3 or x.shape[0] != cfg.in_channels:
            raise UsageError(f"input must be ({cfg.in_channels}, H, W), got {x.shape}")
    else:
        x = rng.normal(size=(cfg.in_channels, args.size, args.size))
    _, fields = run_levels(x, params, cfg, args.level_count)
    scale = cfg.sigma ** args.level_count
    th, tw = x.shape[1] * scale, x.shape[2] * scale
    points = _parse_points(args.at)
    if not points:
        points = [(th * a // 4, tw * b // 4) for a in (1, 2, 3) for b in (1, 2, 3)]
    for y, xx in points:
        if not (0 <= y < th and 0 <= xx < tw):
            raise UsageError(f"target pixel ({y},{xx}) outside the {th}x{tw} output")
    base = x.mean(axis=0)
    for y, xx in points:
        kernel = kernel_at_target(fields[-1], y, xx)
        kpath = f"{args.out_prefix}_kernel_{y}_{xx}.pgm"
        save_kernel_heatmap(kpath, kernel, label=f"target={y},{xx}")
        acc = accumulated_map(fields, cfg, x.shape[1:], y, xx)
        apath = f"{args.out_prefix}_accum_{y}_{xx}.ppm"
        save_accumulated_map(apath, acc, base, label=f"target={y},{xx}")
        print(f"({y},{xx}) kernel_sum={kernel.sum():.6f} accumulated_sum={acc.sum():.6f} "
              f"-> {kpath} {apath}")
    return EXIT_OK


# --------------------------------------------------------------------------
# selftest
# --------------------------------------------------------------------------

def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    if args.golden:
        with open(args.golden, "r", newline="") as f:
            golden = f.read()
    else:
        golden = golden_cost_csv()
    ok = True
    for name, passed, detail in run_selftest(golden, seeds=args.seeds):
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        ok &= passed
    return EXIT_OK if ok else EXIT_FAIL


def golden_cost_csv() -> str:
    return resources.files("carafe").joinpath("data/cost_table_golden.csv").read_text()


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _add_bench_flags(p, seed):
    from .bench import ToyTaskSpec, TrainConfig

    t, d = TrainConfig(), ToyTaskSpec()
    p.add_argument("--epochs", type=int, default=t.epochs)
    p.add_argument("--lr", type=float, default=t.lr)
    p.add_argument("--momentum", type=float, default=t.momentum)
    p.add_argument("--batch-size", type=int, default=t.batch_size)
    p.add_argument("--clip-norm", type=float, default=t.clip_norm,
                   help="global gradient-norm clip; 0 disables")
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--image-size", type=int, default=d.image_size)
    p.add_argument("--n-train", type=int, default=d.n_train)
    p.add_argument("--n-eval", type=int, default=d.n_eval)
    p.add_argument("--pattern", choices=("rectangles", "voronoi"), default=d.pattern)
    p.add_argument("--noise-std", type=float, default=d.noise_std)
    p.add_argument("--channels", type=int, default=t.channels)
    p.add_argument("--out", help="results CSV path")
    p.add_argument("--timing", action="store_true", help="add a wall_time column")
    _add_carafe_flags(p, k_up=t.k_up, k_encoder=t.k_encoder, c_mid=str(t.c_mid))


def build_parser(seed: int = 0) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="carafe", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cost-table", help="FLOPs/params of every upsampler")
    p.add_argument("--channels", type=int, default=256)
    p.add_argument("--sigma", type=int, default=2)
    p.add_argument("--kinds", help="comma-separated kinds (default: all)")
    p.add_argument("--out", help="CSV output path")
    _add_carafe_flags(p)
    p.set_defaults(func=cmd_cost_table)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--seed", type=int, default=seed, help="first seed")
    p.add_argument("--configs", default="1,1,1;2,3,1;2,5,3;3,3,3",
                   help="';'-separated sigma,k_up,k_encoder triples")
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--max-entries", type=int, default=48,
                   help="entries sampled per tensor (all if smaller)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train one toy model")
    p.add_argument("--kind", default="carafe")
    p.add_argument("--save-params", help="write trained CARAFE params (CTNS archive)")
    _add_bench_flags(p, seed)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="train several upsamplers over seeds")
    p.add_argument("--kinds", default="nearest_conv,carafe")
    p.add_argument("--seeds", type=int, default=3)
    _add_bench_flags(p, seed)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("visualize", help="reassembly-weight heatmaps")
    p.add_argument("--params", help="CTNS parameter archive (default: random init)")
    p.add_argument("--input", help="CTNS input tensor (default: random)")
    p.add_argument("--level-count", type=int, default=1)
    p.add_argument("--out-prefix", default="carafe_viz")
    p.add_argument("--at", action="append", help="target pixel y,x (repeatable)")
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--size", type=int, default=8)
    _add_carafe_flags(p)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("selftest", help="invariant and golden-value suite")
    p.add_argument("--golden", help="golden cost CSV (default: packaged copy)")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    try:
        parser = build_parser(_default_seed())
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"carafe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _echo_config(args)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"carafe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CarafeError as exc:
        print(f"carafe: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
