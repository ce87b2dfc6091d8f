"""Command-line entry point: ``asit <subcommand>``."""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import AsitError

log = logging.getLogger("asit")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--manifest", help="dataset manifest CSV (run.manifest)")
    p.add_argument("--seed", type=int, help="run.seed")
    p.add_argument("--run-name", help="run.run_name")
    p.add_argument("--run-root", help="run.run_root (default: $ASIT_RUN_ROOT or ./runs)")
    p.add_argument("--corruption-ratio", type=float, help="sets both zero and alien corruption ratios")
    p.add_argument("--align-masks", action="store_true", help="snap corruption blocks to the patch grid")
    p.add_argument("--mask-block-min", type=int)
    p.add_argument("--mask-block-max", type=int)
    p.add_argument("--epochs", type=int, help="train.epochs")
    p.add_argument("--pooling", choices=("cls", "mean"), help="probe.pooling")


def _overrides(args) -> list[str]:
    over = list(args.set)
    flags = {
        "run.manifest": args.manifest,
        "run.seed": args.seed,
        "run.run_name": args.run_name,
        "run.run_root": args.run_root,
        "corrupt.zero_ratio": args.corruption_ratio,
        "corrupt.alien_ratio": args.corruption_ratio,
        "corrupt.block_min": args.mask_block_min,
        "corrupt.block_max": args.mask_block_max,
        "train.epochs": args.epochs,
        "probe.pooling": args.pooling,
    }
    over += [f"{k}={v}" for k, v in flags.items() if v is not None]
    if args.align_masks:
        over.append("corrupt.align_to_patches=true")
    return over


def _config(args):
    from .config import parse_config

    return parse_config(args.config, _overrides(args))


def cmd_synth(args) -> int:
    from .synth import SyntheticSpec, generate_synthetic_dataset

    spec = SyntheticSpec(
        classes=tuple(args.classes.split(",")), clips_per_class=args.clips_per_class,
        duration_s=args.duration, sr=args.sr, seed=args.seed,
    )
    print(generate_synthetic_dataset(spec, args.out))
    return 0


def cmd_pretrain(args) -> int:
    from .runner import run_pretrain

    print(run_pretrain(_config(args), resume=args.resume))
    return 0


def cmd_eval(kind):
    def run(args) -> int:
        from . import runner

        fn = {"probe": runner.run_probe, "finetune": runner.run_finetune, "extract": runner.run_extract}[kind]
        out = fn(_config(args), args.checkpoint, args.out)
        print(out)
        if kind != "extract":
            print(out.read_text(), end="")
        return 0

    return run


def cmd_plot(args) -> int:
    from .plots import emit_plots

    if not args.metrics and not args.sweep:
        raise SystemExit("plot: give --metrics and/or --sweep")
    for path in emit_plots(args.metrics, args.out, args.sweep):
        print(path)
    return 0


def cmd_sweep(args) -> int:
    from .runner import sweep

    ratios = [float(r) for r in args.ratios.split(",")]
    print(sweep(_config(args), ratios))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asit", description="Self-supervised spectrogram transformer pretraining")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic four-class corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", default="sine,chirp,noise_burst,am_tone")
    p.add_argument("--clips-per-class", type=int, default=500)
    p.add_argument("--duration", type=float, default=6.0)
    p.add_argument("--sr", type=int, default=16000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="self-supervised pretraining into a run directory")
    _add_config_args(p)
    p.add_argument("--resume", action="store_true", help="continue from the run directory's last checkpoint")
    p.set_defaults(func=cmd_pretrain)

    for kind, text in (("probe", "linear probe on frozen teacher features"),
                       ("finetune", "finetune the teacher backbone with a new head"),
                       ("extract", "export per-clip embeddings to .npz")):
        p = sub.add_parser(kind, help=text)
        _add_config_args(p)
        p.add_argument("--checkpoint", help="checkpoint file (run.checkpoint)")
        p.add_argument("--out", help="output file (default: next to the checkpoint)")
        p.set_defaults(func=cmd_eval(kind))

    p = sub.add_parser("plot", help="render loss and ratio-sweep plots")
    p.add_argument("--metrics", help="metrics.csv of a run")
    p.add_argument("--sweep", help="summary.csv of a sweep")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("sweep", help="pretrain and probe at several corruption ratios")
    _add_config_args(p)
    p.add_argument("--ratios", default="0.1,0.3,0.5,0.7,0.9")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except AsitError as exc:
        print(f"asit: error: {exc}", file=sys.stderr)
        context = getattr(exc, "context", None)
        if context:
            for k, v in context.items():
                print(f"  {k}: {v}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
