"""Command-line entry point: ``proxygrad <subcommand> [flags] --outdir DIR``.

Every run writes ``manifest.json`` (the fully resolved configuration) before
its results; ``proxygrad replay DIR/manifest.json --outdir NEW`` re-runs it
and reproduces the outputs byte for byte.

Exit codes: 0 success, 2 usage error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from . import analysis
from .am_engine import TRAJECTORY_HEADER, AmConfig, Blur, InitSpec, Rotate, run_am
from .artifacts import read_manifest, write_csv, write_image, write_manifest
from .datasets import load_idx, synthetic_shapes
from .layers import ActivationRule
from .netspec import build_network, load_network_spec
from .tensor_core import RNG_ALGORITHM, NumericalError, make_rng
from .toy_problems import WhiteImageProblem, optimum
from .train_harness import TinyResNetSpec, TrainConfig, build_tiny_resnet, train

EXIT_USAGE = 2
EXIT_NUMERICAL = 3

log = logging.getLogger("proxygrad")


class UsageError(Exception):
    pass


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _rule(args, default_fwd=0.0) -> ActivationRule:
    fwd = default_fwd if args.slope_fwd is None else args.slope_fwd
    if args.mode == "relu":
        if fwd != 0.0:
            raise UsageError("--mode relu implies --slope-fwd 0")
        return ActivationRule.relu()
    if args.mode == "lrelu":
        if args.slope_bwd is not None and args.slope_bwd != fwd:
            raise UsageError("--mode lrelu uses one slope; set --slope-fwd only")
        return ActivationRule.leaky(fwd)
    if args.slope_bwd is None:
        raise UsageError("--mode proxygrad needs --slope-bwd")
    return ActivationRule(fwd, args.slope_bwd)


def _check_slopes(slopes):
    bad = [v for v in slopes if not 0.0 <= v <= 1.0]
    if bad or not slopes:
        raise UsageError(f"slopes must be a non-empty list in [0, 1], got {slopes}")


def _am_config(args) -> AmConfig:
    regs = []
    if args.blur_sigma > 0:
        regs.append(Blur(args.blur_sigma, args.blur_size))
    if args.rot_deg > 0:
        regs.append(Rotate(args.rot_deg))
    return AmConfig(learning_rate=args.lr, iterations=args.iters,
                    normalize_gradient=args.normalize, regularizers=tuple(regs),
                    init=InitSpec(args.background, args.noise_std, args.seed),
                    snapshot_every=getattr(args, "frame_every", 0))


def _manifest(args, outputs, extra=None) -> dict:
    config = {k: v for k, v in vars(args).items() if k not in ("outdir", "func", "verbose")}
    m = {"tool": "proxygrad", "version": __version__, "subcommand": args.command,
         "seed": args.seed, "rng": RNG_ALGORITHM, "config": config,
         "outputs": sorted(outputs)}
    if extra:
        m["notes"] = extra
    return m


def _start(args, outputs, extra=None) -> Path:
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.json", _manifest(args, outputs, extra))
    return out


# --------------------------------------------------------------------------
# Subcommands


def cmd_toy(args):
    kind = args.problem.upper()
    default_fwd = 0.0 if kind == "F1" else 0.1
    rule = _rule(args, default_fwd)
    try:
        problem = WhiteImageProblem(kind, slope=rule.forward_slope, p=args.p,
                                    shape=(args.height, args.width))
        config = _am_config(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _start(args, ["manifest.json", "trajectory.csv", "init.pgm", "final.pgm"],
                 {"rule": [rule.forward_slope, rule.backward_slope],
                  "optimum": optimum(problem)[1]})
    traj = run_am(problem, rule, config)
    write_csv(out / "trajectory.csv", TRAJECTORY_HEADER, traj.rows())
    write_image(out / "init.pgm", traj.initial_image)
    write_image(out / "final.pgm", traj.final_image)
    return traj


def cmd_am(args):
    rule = _rule(args, 0.0)
    try:
        records = load_network_spec(args.net_spec)
        graph = build_network(records, rule, seed=args.seed)
        config = _am_config(args)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    shape = graph.nodes[graph.node_id("x")].shape
    ext = "pgm" if shape[0] == 1 else "ppm"
    frames = []
    if args.frame_every:
        frames = [f"frame_{t:05d}.{ext}" for t in range(0, args.iters + 1, args.frame_every)]
    outputs = ["manifest.json", "trajectory.csv", f"init.{ext}", f"final.{ext}"] + frames
    out = _start(args, outputs, {"rule": [rule.forward_slope, rule.backward_slope]})
    traj = run_am(graph, rule, config)
    write_csv(out / "trajectory.csv", TRAJECTORY_HEADER, traj.rows())
    write_image(out / f"init.{ext}", traj.initial_image)
    write_image(out / f"final.{ext}", traj.final_image)
    for t, img in sorted(traj.snapshots.items()):
        write_image(out / f"frame_{t:05d}.{ext}", img)
    return traj


def cmd_moments(args):
    _check_slopes(args.slopes)
    if args.mc_n < 2:
        raise UsageError("--mc-n must be >= 2")
    out = _start(args, ["manifest.json", "moments.csv"])
    rows = analysis.moments_table(args.slopes, args.mc_n, args.seed)
    header = ["slope", "mean_closed", "mean_mc", "mean_tol",
              "var_closed", "var_mc", "var_tol", "agree"]
    write_csv(out / "moments.csv", header, ([r[h] for h in header] for r in rows))
    return rows


def _resnet_spec(args) -> TinyResNetSpec:
    return TinyResNetSpec(widths=tuple(args.widths), blocks=tuple(args.blocks),
                          classes=args.classes,
                          input_shape=(1, args.image_size, args.image_size))


def cmd_gradmag(args):
    bn = {"on": (True,), "off": (False,), "both": (True, False)}[args.bn]
    _check_slopes(args.slopes)
    for m in args.modes:
        if m not in ("leaky", "proxygrad"):
            raise UsageError(f"unknown mode {m!r}; use leaky,proxygrad")
    out = _start(args, ["manifest.json", "gradmag.csv"])
    profiles = analysis.sweep_gradient_magnitude(
        _resnet_spec(args), args.slopes, modes=args.modes, seeds=range(args.seeds),
        batchnorm=bn, batch_size=args.batch)
    rows = []
    for p in profiles:
        for j, layer in enumerate(p.layers):
            rows.append((p.mode, p.slope, int(p.batchnorm), layer,
                         p.mean[j], p.std[j], p.n_seeds))
    write_csv(out / "gradmag.csv",
              ["mode", "slope", "bn", "layer", "mean_abs_grad", "std", "n_seeds"], rows)
    return profiles


def cmd_bnstd(args):
    _check_slopes(args.slopes)
    out = _start(args, ["manifest.json", "bn_std.csv"])
    rows = []
    for s in args.slopes:
        prof = analysis.bn_input_std_profile(_resnet_spec(args), ActivationRule.leaky(s),
                                             range(args.seeds), batch_size=args.batch)
        for layer, vals in prof.items():
            rows.append((s, layer, vals.mean(), vals.std(), len(vals)))
    write_csv(out / "bn_std.csv", ["slope", "layer", "mean_std", "std_over_seeds", "n_seeds"], rows)
    return rows


def cmd_train(args):
    try:
        rule = ActivationRule.from_mode(args.mode, args.slope)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.dataset == "synthetic":
        train_ds = synthetic_shapes(args.per_class, args.classes, args.image_size,
                                    make_rng(args.seed, "data-train"))
        test_ds = synthetic_shapes(args.test_per_class, args.classes, args.image_size,
                                   make_rng(args.seed, "data-test"), split="test")
    else:
        if not (args.train_images and args.train_labels):
            raise UsageError("--dataset idx needs --train-images and --train-labels")
        try:
            train_ds = load_idx(args.train_images, args.train_labels, args.classes)
            test_ds = load_idx(args.test_images, args.test_labels, args.classes, split="test") \
                if args.test_images else None
        except (OSError, ValueError) as exc:
            raise UsageError(str(exc)) from exc
    try:
        spec = TinyResNetSpec(widths=tuple(args.widths), blocks=tuple(args.blocks), rule=rule,
                              batchnorm=not args.no_bn, classes=train_ds.classes,
                              input_shape=train_ds.input_shape)
        config = TrainConfig(epochs=args.epochs, batch_size=args.batch, learning_rate=args.lr,
                             lr_decay=args.lr_decay, milestones=tuple(args.milestones),
                             momentum=args.momentum, weight_decay=args.weight_decay,
                             optimizer=args.optimizer, augment=args.augment, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _start(args, ["manifest.json", "history.csv"],
                 {"rule": [rule.forward_slope, rule.backward_slope],
                  "optimizer_note": "SGD with momentum / Adam; Lamb is not implemented"})
    graph = build_tiny_resnet(spec, args.seed)
    hist = train(graph, train_ds, config, test_ds)
    write_csv(out / "history.csv", ["epoch", "loss", "train_acc", "test_acc"], hist.rows())
    return hist


def cmd_replay(args):
    try:
        manifest = read_manifest(args.manifest)
        config = dict(manifest["config"])
        func = COMMANDS[manifest["subcommand"]]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot replay {args.manifest}: {exc}") from exc
    config["outdir"] = args.outdir
    ns = argparse.Namespace(**config)
    ns.func = func
    ns.verbose = False
    return ns.func(ns)


# --------------------------------------------------------------------------
# Parser


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--outdir", required=True)


def _add_rule_flags(p, modes=("relu", "lrelu", "proxygrad"), default="relu"):
    p.add_argument("--mode", choices=modes, default=default)
    p.add_argument("--slope-fwd", type=float, default=None)
    p.add_argument("--slope-bwd", type=float, default=None)


def _add_am_flags(p, lr, iters):
    p.add_argument("--iters", type=int, default=iters)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--blur-sigma", type=float, default=0.0)
    p.add_argument("--blur-size", type=int, default=3)
    p.add_argument("--rot-deg", type=float, default=0.0)
    p.add_argument("--background", type=float, default=0.0)
    p.add_argument("--noise-std", type=float, default=0.1)


def _add_resnet_flags(p, image_size=12):
    p.add_argument("--widths", type=_ints, default=[8, 16])
    p.add_argument("--blocks", type=_ints, default=[1, 1])
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--image-size", type=int, default=image_size)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="proxygrad", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy", help="activation maximization on a white image problem")
    p.add_argument("--problem", choices=["f1", "f2", "f3", "conv"], required=True)
    _add_rule_flags(p, default="lrelu")
    p.add_argument("--p", type=float, default=0.2)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    _add_am_flags(p, lr=2.0, iters=200)
    _add_common(p)
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("am", help="activation maximization on a JSON network spec")
    p.add_argument("--net-spec", required=True)
    _add_rule_flags(p)
    _add_am_flags(p, lr=2.0, iters=200)
    p.add_argument("--frame-every", type=int, default=0)
    _add_common(p)
    p.set_defaults(func=cmd_am)

    p = sub.add_parser("moments", help="rectified Gaussian moments vs Monte-Carlo")
    p.add_argument("--slopes", type=_floats, default=[round(0.1 * k, 1) for k in range(11)])
    p.add_argument("--mc-n", type=int, default=1_000_000)
    _add_common(p)
    p.set_defaults(func=cmd_moments)

    p = sub.add_parser("gradmag", help="gradient magnitude at the first block vs slope")
    p.add_argument("--slopes", type=_floats, default=[0.0, 0.3, 0.6, 0.9])
    p.add_argument("--modes", type=lambda t: t.split(","), default=["leaky", "proxygrad"])
    p.add_argument("--bn", choices=["on", "off", "both"], default="both")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--batch", type=int, default=32)
    _add_resnet_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_gradmag)

    p = sub.add_parser("bnstd", help="std of batch-norm inputs vs leaky slope")
    p.add_argument("--slopes", type=_floats, default=[0.0, 0.3, 0.6, 0.9, 1.0])
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--batch", type=int, default=32)
    _add_resnet_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_bnstd)

    p = sub.add_parser("train", help="train a tiny ResNet and log per-epoch history")
    p.add_argument("--dataset", choices=["synthetic", "idx"], default="synthetic")
    p.add_argument("--train-images")
    p.add_argument("--train-labels")
    p.add_argument("--test-images")
    p.add_argument("--test-labels")
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--test-per-class", type=int, default=100)
    p.add_argument("--mode", choices=["relu", "lrelu", "proxygrad"], default="relu")
    p.add_argument("--slope", type=float, default=0.1,
                   help="negative slope for lrelu / backward slope for proxygrad")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--lr-decay", type=float, default=0.1)
    p.add_argument("--milestones", type=_ints, default=[20])
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--optimizer", choices=["sgd-momentum", "adam"], default="sgd-momentum")
    p.add_argument("--augment", action="store_true")
    p.add_argument("--no-bn", action="store_true")
    _add_resnet_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("replay", help="re-run the configuration stored in a manifest")
    p.add_argument("manifest")
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_replay, seed=None)
    return parser


COMMANDS = {"toy": cmd_toy, "am": cmd_am, "moments": cmd_moments, "gradmag": cmd_gradmag,
            "bnstd": cmd_bnstd, "train": cmd_train}


_PATH_ARGS = ("net_spec", "train_images", "train_labels", "test_images", "test_labels")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    # input files are recorded as absolute paths so manifests replay from anywhere
    for name in _PATH_ARGS:
        if getattr(args, name, None):
            setattr(args, name, str(Path(getattr(args, name)).resolve()))
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"proxygrad {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"proxygrad {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
