"""Command-line toolchain: train, boost, match, eval, bench, verify.

Exit codes: 0 success, 1 verification failure, 2 usage/configuration
error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import itertools
import sys
import time
import tracemalloc
from statistics import median

import numpy as np

from . import booster, diffkernel as dk, fileio, matcher, trainer, verify
from .datagen import SceneSpec, heldout_pairs, training_pool
from .errors import FeatboostError, NumericalAbort
from .matcher import PlanarWarp

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def load_warp_text(path):
    """Read a homography stored as 9 whitespace-separated numbers."""
    values = np.loadtxt(path, dtype=np.float64).reshape(3, 3)
    return PlanarWarp(values)


def save_warp_text(path, warp):
    np.savetxt(path, warp.matrix, fmt="%.17g")


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _float_csv(value):
    return repr(float(value))


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args):
    config = trainer.TrainConfig.from_file(args.config)
    scene = SceneSpec.from_file(args.scene)
    seed = config.seed if args.seed is None else args.seed
    params = booster.BoosterParams.init_random(scene.dim, config.layers, config.head,
                                               seed=seed)
    stream = itertools.cycle(training_pool(scene, seed, config.train_pairs))
    heldout = heldout_pairs(scene, seed, config.heldout_pairs)
    result = trainer.train(config, stream, params, heldout)
    fileio.save_checkpoint(args.out_checkpoint, result.params)
    _write_text(args.out_checkpoint + ".metrics.csv",
                trainer.metrics_to_csv(result.metrics))
    if result.aborted:
        print(f"training aborted: {result.abort_reason}", file=sys.stderr)
        return EXIT_NUMERIC
    final = result.metrics[-1]
    print(f"trained {config.epochs} epochs: loss {final['loss']:.4f}, "
          f"held-out AP boosted {final['ap_boosted']:.4f} vs raw {final['ap_raw']:.4f}")
    print(f"checkpoint: {args.out_checkpoint}")
    print(f"metrics: {args.out_checkpoint}.metrics.csv")
    return EXIT_OK


def cmd_boost(args):
    params = fileio.load_checkpoint(args.checkpoint)
    features = fileio.load_features(args.in_path)
    if len(features) and features.dim != params.dim:
        raise FeatboostError(
            f"feature dim {features.dim} does not match checkpoint dim {params.dim}")
    boosted = booster.boost(features, params)
    fileio.save_features(args.out, boosted)
    print(f"boosted {len(boosted)} descriptors ({params.head} head) -> {args.out}")
    return EXIT_OK


def _parse_filter(spec):
    if spec is None:
        return None
    try:
        mode, raw = spec.split(":", 1)
        tau = float(raw)
    except ValueError as exc:
        raise FeatboostError(f"bad filter spec {spec!r}, expected ratio:T or dist:T") from exc
    if mode == "ratio":
        return ("ratio", tau)
    if mode == "dist":
        return ("distance", tau)
    raise FeatboostError(f"unknown filter mode {mode!r}, expected ratio or dist")


def _run_matching(args):
    a = fileio.load_features(args.a)
    b = fileio.load_features(args.b)
    fwd = matcher.nn_match(a, b, args.metric)
    bwd = matcher.nn_match(b, a, args.metric)
    ms = matcher.mutual_check(fwd, bwd)
    flt = _parse_filter(args.filter)
    if flt is not None:
        ms = matcher.filter_matches(ms, flt[0], flt[1])
    return a, b, ms


def _matches_csv(ms):
    lines = ["i,j,distance,ratio"]
    for k in range(len(ms)):
        ratio = "" if ms.ratio is None else _float_csv(ms.ratio[k])
        lines.append(f"{ms.idx_a[k]},{ms.idx_b[k]},{_float_csv(ms.distance[k])},{ratio}")
    return "\n".join(lines) + "\n"


def cmd_match(args):
    _, _, ms = _run_matching(args)
    _write_text(args.report, _matches_csv(ms))
    print(f"{len(ms)} matches -> {args.report}")
    return EXIT_OK


def cmd_eval(args):
    a, b, ms = _run_matching(args)
    warp = load_warp_text(args.warp)
    curve = matcher.mma(ms, warp, a, b)
    prefix = args.report
    _write_text(prefix + ".matches.csv", _matches_csv(ms))
    mma_lines = ["threshold_px,mma"]
    for t, v in zip(matcher.MMA_THRESHOLDS, curve):
        mma_lines.append(f"{t},{_float_csv(v)}")
    _write_text(prefix + ".mma.csv", "\n".join(mma_lines) + "\n")
    _write_text(prefix + ".summary.csv",
                "features_a,features_b,matches\n"
                f"{len(a)},{len(b)},{len(ms)}\n")
    _plot_mma(prefix + ".mma.png", curve)
    print(f"features {len(a)}/{len(b)}, matches {len(ms)}, "
          f"MMA@3px {curve[2]:.4f} -> {prefix}.mma.csv")
    return EXIT_OK


def _plot_mma(path, curve):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(matcher.MMA_THRESHOLDS, curve, marker="o")
    ax.set_xlabel("reprojection error threshold [px]")
    ax.set_ylabel("mean matching accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    # strip the creation date so identical inputs give identical bytes
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)


def _bench_once(kind, x, weights):
    if kind == "aft":
        out = booster.aft_simple(dk.tensor(x), *[dk.tensor(w) for w in weights])
        return out.data
    return booster.mha_reference(x, 4, *weights)


def cmd_bench(args):
    n_values = [int(v) for v in args.n.split(",")]
    rng = np.random.default_rng(args.seed)
    d = args.d
    weights = [rng.uniform(-0.5, 0.5, (d, d)) for _ in range(3)]
    print("attention,n,d,trials,median_seconds,peak_alloc_bytes")
    for n in n_values:
        x = rng.uniform(-1.0, 1.0, (n, d))
        _bench_once(args.attention, x, weights)  # warm up caches and pools
        times = []
        for _ in range(args.trials):
            t0 = time.perf_counter()
            _bench_once(args.attention, x, weights)
            times.append(time.perf_counter() - t0)
        tracemalloc.start()
        _bench_once(args.attention, x, weights)
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        print(f"{args.attention},{n},{d},{args.trials},"
              f"{_float_csv(median(times))},{peak}")
    return EXIT_OK


def cmd_verify(args):
    if args.inject_fault:
        dk.set_backward_fault(args.inject_fault)
    try:
        rows = []
        if args.suite in ("gradcheck", "all"):
            seeds = 10 if args.quick else 100
            rows += verify.run_gradcheck_suite(seeds=seeds)
        if args.suite in ("oracles", "all"):
            rows += verify.run_oracle_suite(scale=0.1 if args.quick else 1.0)
    finally:
        dk.set_backward_fault(None)
    print(verify.format_table(rows))
    failed = [r for r in rows if not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} checks passed")
    return EXIT_OK if not failed else EXIT_VERIFY_FAILED


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="featboost",
        description="Descriptor boosting toolchain: train a booster on synthetic "
                    "homography scenes, boost feature files, match and evaluate them, "
                    "benchmark the attention kernels, and run verification suites.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a booster on a synthetic scene")
    p.add_argument("--config", required=True,
                   help="training config (key=value: epochs, steps_per_epoch, "
                        "batch_pairs, base_lr, warmup_steps, lambda, weight_decay, "
                        "seed, bins, head, layers, train_pairs, heldout_pairs)")
    p.add_argument("--scene", required=True,
                   help="scene config (key=value: width, height, num_keypoints, kind, "
                        "dim, rot_max, scale_min, scale_max, trans_max, persp_max, "
                        "sigma, rho, dropout, seed)")
    p.add_argument("--out-checkpoint", required=True,
                   help="checkpoint path; metrics CSV lands next to it "
                        "(columns: epoch,step,lr,loss,ap_boosted,ap_raw)")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed (drives init, data, and eval)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("boost", help="boost a feature file with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="in_path", required=True, help="input feature file")
    p.add_argument("--out", required=True, help="output feature file")
    p.set_defaults(func=cmd_boost)

    for name, help_text in (("match", "mutual-NN match two feature files"),
                            ("eval", "match plus MMA curve against a known warp")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--a", required=True, help="feature file A")
        p.add_argument("--b", required=True, help="feature file B")
        p.add_argument("--metric", required=True, choices=["euclidean", "hamming"])
        p.add_argument("--filter", default=None,
                       help="ratio:T or dist:T (keeps statistic <= T)")
        if name == "eval":
            p.add_argument("--warp", required=True,
                           help="text file with the 3x3 A->B homography (9 numbers)")
            p.add_argument("--report", required=True,
                           help="output prefix: writes .matches.csv, .mma.csv, "
                                ".summary.csv, .mma.png")
            p.set_defaults(func=cmd_eval)
        else:
            p.add_argument("--report", required=True,
                           help="output CSV path (columns: i,j,distance,ratio)")
            p.set_defaults(func=cmd_match)

    p = sub.add_parser("bench", help="time/allocation scaling of the attention kernels")
    p.add_argument("--attention", required=True, choices=["aft", "mha"])
    p.add_argument("--n", required=True, help="comma-separated context sizes")
    p.add_argument("--d", type=int, default=64, help="feature dimension")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", help="run gradient-check / oracle suites")
    p.add_argument("--suite", required=True, choices=["gradcheck", "oracles", "all"])
    p.add_argument("--quick", action="store_true",
                   help="smaller instance counts (smoke testing)")
    p.add_argument("--inject-fault", default=None, metavar="OP",
                   help="debug: corrupt the named op's backward to prove the "
                        "checker catches it (sigmoid, relu, or affine)")
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FeatboostError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
