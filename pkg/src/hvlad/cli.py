"""Command-line entry points: pair, convert, extract, train, eval, report, synth.

Exit status:

    0  success
    2  invalid arguments or configuration
    3  corpus, audio or converter problems (missing files included)
    4  training aborted on a non-finite value
    5  model config / checkpoint / report mismatch

Diagnostics go to stderr; stdout carries data only. Any option can also be
given in a plain ``key=value`` file passed with ``--config`` (keys are the
long option names, with ``-`` or ``_``); flags on the command line win.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data, dsp, synth, traineval
from .errors import (
    AudioError,
    BadOutput,
    CheckpointFormatError,
    ConfigMismatch,
    ConverterFailed,
    CorpusError,
    InvalidConfig,
    NonFinite,
)
from .model import VARIANTS, EncoderConfig

log = logging.getLogger("hvlad")

EXIT_OK, EXIT_USAGE, EXIT_CORPUS, EXIT_NONFINITE, EXIT_MISMATCH = 0, 2, 3, 4, 5

_EXIT_FOR = (
    (NonFinite, EXIT_NONFINITE),
    ((ConfigMismatch, CheckpointFormatError), EXIT_MISMATCH),
    ((CorpusError, AudioError, ConverterFailed, BadOutput, FileNotFoundError), EXIT_CORPUS),
    ((InvalidConfig, ValueError), EXIT_USAGE),
)


class UsageError(Exception):
    pass


def _int_list(text):
    return tuple(int(x) for x in str(text).split(","))


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def read_config_file(path) -> dict:
    out = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected key=value, got {raw!r}")
        out[key.strip().replace("-", "_")] = val.strip()
    return out


# -- subcommands --------------------------------------------------------------

def cmd_synth(args):
    profiles = synth.write_corpus(args.out, n_speakers=args.speakers, n_utts=args.utts,
                                  seed=args.seed)
    for p in profiles:
        print(f"{p.name}\t{args.out}/{p.name}")
    return EXIT_OK


def cmd_pair(args):
    index = data.scan_corpus(args.corpus)
    manifest = data.build_pairing_manifest(index, n_per_speaker=args.n_per_speaker,
                                           n_targets=args.n_targets, seed=args.seed)
    n = len(manifest.records)
    if args.n_train is None and args.n_test is None:
        n_train, n_test = data.default_split_sizes(n)
    elif args.n_train is not None and args.n_test is not None:
        n_train, n_test = args.n_train, args.n_test
    else:
        n_train = args.n_train if args.n_train is not None else n - args.n_test
        n_test = n - n_train
    data.split_train_test(manifest, n_train, n_test, seed=args.seed)
    data.write_manifest(args.out, manifest)
    print(f"{args.out}\t{n}\t{n_train}\t{n_test}")
    return EXIT_OK


def cmd_convert(args):
    manifest = data.read_manifest(args.manifest)
    data.convert_manifest(manifest, args.converter, args.out_dir,
                          manifest_path=args.out or args.manifest, jobs=args.jobs,
                          converter_id=args.converter_id)
    print(f"{args.out or args.manifest}\t{len(manifest.records)}")
    return EXIT_OK


def cmd_extract(args):
    manifest = data.read_manifest(args.manifest)
    n = traineval.extract_spectrograms(manifest, args.cache_dir, rate=args.sample_rate)
    print(f"{args.cache_dir}\t{n}")
    return EXIT_OK


def _model_config(args, manifest) -> EncoderConfig:
    n_classes = args.n_classes or manifest.n_classes
    n_frames = traineval.input_frames(args.crop_s, args.sample_rate)
    n_bins = dsp.FFT_SIZE // 2 + 1
    cfg = EncoderConfig(variant=args.variant, K=args.clusters, n_classes=n_classes,
                        trunk_channels=args.trunk_channels, stage_depths=args.stage_depths,
                        embed_dim=args.embed_dim, n_bins=n_bins, n_frames=n_frames,
                        intra_norm=not args.no_intra_norm)
    return cfg.validate()


def cmd_train(args):
    manifest = data.read_manifest(args.manifest)
    run_dir = Path(args.run_dir)
    if args.resume:
        cfg = traineval.read_model_config(Path(args.resume).parent)
    else:
        cfg = _model_config(args, manifest)
    tc = traineval.TrainConfig(batch_size=args.batch_size, steps=args.steps, seed=args.seed,
                               crop_s=args.crop_s, eval_every=args.eval_every, lr=args.lr,
                               checkpoint_dir=str(run_dir), sample_rate=args.sample_rate)
    source = traineval.FeatureSource(args.sample_rate, cache_dir=args.cache_dir)
    res = traineval.train(cfg, manifest, tc, source=source, resume=args.resume)
    for p in res.checkpoints:
        print(p)
    return EXIT_OK


def _expand_checkpoints(items):
    """Run directories expand to their checkpoint series, files stay as given."""
    groups = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            series = traineval.list_checkpoints(p)
            if not series:
                raise FileNotFoundError(f"no checkpoints in {p}")
            groups.append(series)
        elif p.exists():
            groups.append([p])
        else:
            raise FileNotFoundError(str(p))
    return groups


def _report_name(ck: Path, split):
    return f"{ck.parent.name}_{ck.stem}_{split}.json"


def cmd_eval(args):
    manifest = data.read_manifest(args.manifest)
    source = traineval.FeatureSource(args.sample_rate, cache_dir=args.cache_dir)
    out_dir = Path(args.out_dir) if args.out_dir else None
    print("checkpoint\tvariant\tclusters\tstep\ttop1\ttop5\tn")
    for series in _expand_checkpoints(args.checkpoints):
        rep = traineval.evaluate(series, manifest, split=args.split, seed=args.seed,
                                 n_crops=args.n_crops, crop_s=args.crop_s, source=source)
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / _report_name(series[-1], args.split)).write_text(rep.to_json(), encoding="utf-8")
        print(f"{rep.checkpoint}\t{rep.variant}\t{rep.K}\t{rep.step}\t{rep.percent('top1')}\t"
              f"{rep.percent('top5')}\t{rep.n_items}")
    return EXIT_OK


def cmd_report(args):
    from . import plotting, report

    paths = []
    for item in args.reports:
        p = Path(item)
        paths.extend(sorted(p.glob("*.json")) if p.is_dir() else [p])
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(str(p))
    try:
        reports = report.load_reports(paths)
    except (json.JSONDecodeError, TypeError, KeyError) as exc:
        raise ConfigMismatch(f"not an evaluation report: {exc}") from exc
    groups = report.group_reports(reports, allow_mixed=args.group)
    rows = report.summarize(groups)
    text = report.table_text(rows)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "table.tsv").write_text(text, encoding="utf-8")
    plotting.plot_curves(groups, out_dir / "curves.svg")
    sys.stdout.write(text)
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file with defaults for any option")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=_positive_int, default=1,
                        help="parallel workers where a stage supports them")
    common.add_argument("--sample-rate", type=_positive_int, default=dsp.DEFAULT_SAMPLE_RATE)
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="hvlad", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)
    ap.subcommands = sub.choices

    p = sub.add_parser("synth", parents=[common], help="write a synthetic multi-speaker corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=_positive_int, default=10)
    p.add_argument("--utts", type=_positive_int, default=20)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pair", parents=[common], help="build and split the pairing manifest")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-targets", type=int, choices=(1, 2, 3), default=1)
    p.add_argument("--n-per-speaker", type=_positive_int, default=100)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.set_defaults(func=cmd_pair)

    p = sub.add_parser("convert", parents=[common], help="run the external converter per record")
    p.add_argument("--manifest", required=True)
    p.add_argument("--converter", required=True,
                   help="command template with {source}, {targets} and {out}")
    p.add_argument("--converter-id")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--out", help="write the updated manifest here instead of in place")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("extract", parents=[common], help="cache spectrograms of converted audio")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache-dir", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", parents=[common], help="train one encoder")
    p.add_argument("--manifest", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--variant", choices=VARIANTS, default="hvlad")
    p.add_argument("--clusters", type=int, default=64, help="VLAD clusters (32, 64, 128 in the grid)")
    p.add_argument("--n-classes", type=int, help="defaults to the manifest's speaker count")
    p.add_argument("--trunk-channels", type=_int_list, default=(16, 32, 64, 128))
    p.add_argument("--stage-depths", type=_int_list, default=(2, 3, 3, 3))
    p.add_argument("--embed-dim", type=_positive_int, default=512)
    p.add_argument("--no-intra-norm", action="store_true")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch-size", type=_positive_int, default=32)
    p.add_argument("--eval-every", type=_positive_int, default=100)
    p.add_argument("--crop-s", type=float, default=2.5)
    p.add_argument("--lr", type=float, default=traineval.LEARNING_RATE)
    p.add_argument("--cache-dir")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate checkpoints or run directories")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--n-crops", type=_positive_int, default=1)
    p.add_argument("--crop-s", type=float, default=2.5)
    p.add_argument("--cache-dir")
    p.add_argument("--out-dir", help="write one JSON report per input here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="aggregate JSON reports into a table and plot")
    p.add_argument("reports", nargs="+", help="report files or directories of them")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--group", action="store_true", help="allow several variants in one report")
    p.set_defaults(func=cmd_report)
    return ap


def _apply_config(parser, argv):
    """Parse with defaults taken from ``--config``; explicit flags still win."""
    argv = sys.argv[1:] if argv is None else list(argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in parser.subcommands), None)
    if not known.config or command is None:
        return parser.parse_args(argv)
    sub = parser.subcommands[command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, val in read_config_file(known.config).items():
        act = actions.get(key)
        if act is None or key in ("config", "help"):
            raise UsageError(f"unknown config key {key!r} for {command}")
        if act.nargs == 0:
            defaults[key] = val.lower() in ("1", "true", "yes", "on")
        else:
            defaults[key] = act.type(val) if act.type else val
        act.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except (UsageError, OSError, argparse.ArgumentTypeError, ValueError) as exc:
        print(f"hvlad: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except Exception as exc:
        for kinds, code in _EXIT_FOR:
            if isinstance(exc, kinds):
                print(f"hvlad {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
