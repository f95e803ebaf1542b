"""``ulid`` command line: synth, features, train, eval, infer, rf.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Logs go to stderr;
data goes to files or stdout.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .backbone import ConvStackSpec, SpecParseError, fig3_spec, format_rf_table, receptive_field
from .config import ConfigError, RunConfig, describe_defaults
from .encoders import KINDS

log = logging.getLogger("ulid")


class UsageError(Exception):
    pass


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {
        "seed": getattr(args, "seed", None),
        "workers": getattr(args, "workers", None),
        "encoder.kind": getattr(args, "encoder", None),
        "conv.spec": getattr(args, "conv", None),
        "train.epochs": getattr(args, "epochs", None),
        "paths.train_manifest": getattr(args, "train_manifest", None),
        "paths.out_dir": getattr(args, "out", None),
    }
    for key, value in overrides.items():
        if value is not None:
            cfg.set(key, value)
    return cfg


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    return int(os.environ.get("ULID_SEED", 0))


# subcommands -----------------------------------------------------------------

def cmd_synth(args):
    from .synth import generate_corpus

    durations = [float(d) for d in args.durations.split(",") if d]
    paths = generate_corpus(args.out, args.langs, args.train_per_lang, args.test_per_lang, durations,
                            _seed(args), args.sample_rate, workers=args.workers)
    for name, p in paths.items():
        print(f"{name}\t{p}")


def cmd_features(args):
    from .fileio import ManifestEntry, atomic_write, format_manifest, read_manifest, write_features
    from .frontend import load_features

    cfg = _load_config(args)
    entries = read_manifest(args.manifest)
    out = Path(args.out)
    written = []

    def one(e):
        f = load_features(e.path, **cfg.frontend_options())
        dest = out / f"{e.id}.ulfb"
        write_features(dest, f.frames)
        return ManifestEntry(e.id, dest.resolve(), e.label, e.bucket)

    if args.workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(args.workers) as pool:
            written = list(pool.map(one, entries))
    else:
        written = [one(e) for e in entries]
    manifest = out / (Path(args.manifest).stem + ".feats.lst")
    atomic_write(manifest, format_manifest(written))
    print(manifest)


def cmd_train(args):
    from .fileio import atomic_write, read_manifest
    from .frontend import load_manifest_features
    from .model import ModelSpec, build_model
    from .trainer import TrainingDiverged, train

    cfg = _load_config(args)
    if not cfg["paths.train_manifest"]:
        raise UsageError("no training manifest: pass --train-manifest or set paths.train_manifest")
    conv = cfg.conv_spec()
    spec = ModelSpec(conv, cfg.encoder_spec(conv.final_feature_dim), 2, cfg.seed())
    entries = read_manifest(cfg["paths.train_manifest"])
    languages = sorted({e.label for e in entries if e.label})
    if len(languages) < 2:
        raise ValueError("training manifest needs labels from at least two languages")
    spec.n_classes = len(languages)
    out = Path(cfg["paths.out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "run.cfg", cfg.dump())
    log.info("loading %d training utterances", len(entries))
    feats = load_manifest_features([e for e in entries if e.label], int(cfg["workers"]), **cfg.frontend_options())
    labels = [languages.index(e.label) for e in entries if e.label]
    model = build_model(spec, languages=languages)
    tcfg = cfg.train_config()
    log.info("training CNN-%s for %d epochs on %d utterances", spec.encoder.kind.upper(), tcfg.epochs, len(feats))
    try:
        result = train(model, feats, labels, tcfg, out, out / "train.log", cfg.hash())
    except TrainingDiverged as exc:
        log.error("%s (last good checkpoint: %s)", exc, exc.last_good)
        return 1
    print(result.checkpoints[-1])
    return 0


def cmd_eval(args):
    from .evaluator import format_report, format_score_file, min_c_avg, score_run
    from .fileio import atomic_write

    cfg = _load_config(args)
    scores, rows = score_run(args.checkpoint, args.manifest, args.workers, **cfg.frontend_options())
    report = format_report(rows, title=args.title or Path(args.checkpoint).stem)
    if args.scores:
        atomic_write(args.scores, format_score_file(scores))
    if args.report:
        atomic_write(args.report, report + "\n")
    print(report)
    if args.min_cavg:
        for r in rows:
            sub = scores.subset([b == r.bucket for b in scores.buckets])
            print(f"min-Cavg {r.bucket}: {min_c_avg(sub):.2f}")
    return 0


def cmd_infer(args):
    from .fileio import atomic_write, read_manifest
    from .frontend import load_features
    from .model import load_checkpoint, log_posteriors

    cfg = _load_config(args)
    model, _ = load_checkpoint(args.checkpoint)
    lines, failures = [], 0
    entries = read_manifest(args.manifest)
    for e in entries:
        try:
            lp = log_posteriors(model, load_features(e.path, **cfg.frontend_options()))
        except Exception as exc:
            log.warning("skipping %s: %s", e.id, exc)
            failures += 1
            continue
        lines.append(f"{e.id} " + ",".join(f"{v:.10g}" for v in lp))
    text = "\n".join(lines) + "\n"
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    return 1 if failures > 0.05 * max(len(entries), 1) else 0


def cmd_rf(args):
    if args.fig3:
        spec = fig3_spec()
    elif args.spec:
        spec = ConvStackSpec.parse(args.spec)
    else:
        spec = _load_config(args).conv_spec()
    rows = receptive_field(spec, args.length)
    print(format_rf_table(rows, args.length))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ulid", description="End-to-end language identification toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic multi-language corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--langs", type=int, default=6)
    s.add_argument("--train-per-lang", type=int, default=200)
    s.add_argument("--test-per-lang", type=int, default=50)
    s.add_argument("--durations", default="1,3,10", help="comma-separated test durations in seconds")
    s.add_argument("--sample-rate", type=int, default=8000, choices=(8000, 16000))
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(fn=cmd_synth)

    f = sub.add_parser("features", help="cache VAD-filtered, normalized Fbank features")
    f.add_argument("--manifest", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--config")
    f.add_argument("--workers", type=int, default=1)
    f.set_defaults(fn=cmd_features)

    t = sub.add_parser("train", help="train a CNN-<encoder> model",
                       epilog="config keys and defaults:\n" + describe_defaults(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("--config")
    t.add_argument("--encoder", choices=KINDS, help="encoding layer (overrides encoder.kind)")
    t.add_argument("--train-manifest")
    t.add_argument("--conv", help="conv stack string (overrides conv.spec)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", help="run directory (overrides paths.out_dir)")
    t.add_argument("--seed", type=int)
    t.add_argument("--workers", type=int)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a test manifest and print the Cavg/EER table")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--config")
    e.add_argument("--scores", help="write per-utterance score file")
    e.add_argument("--report", help="also write the report table to this file")
    e.add_argument("--title")
    e.add_argument("--min-cavg", action="store_true", help="also print min-Cavg per bucket")
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="write log-posteriors for each manifest utterance")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--manifest", required=True)
    i.add_argument("--config")
    i.add_argument("--out")
    i.set_defaults(fn=cmd_infer)

    r = sub.add_parser("rf", help="receptive-field table of a conv stack",
                       description="Layer strings: c|r KHxKW[/S or /SHxSW][@C][pPHxPW], e.g. 'c3x3/1@16 r3x3/2@32'.")
    g = r.add_mutually_exclusive_group()
    g.add_argument("--fig3", action="store_true", help="five 3x3 stride-2 convs")
    g.add_argument("--spec", help="layer string")
    g.add_argument("--config")
    r.add_argument("--length", type=int, help="input frames, to show output shapes")
    r.set_defaults(fn=cmd_rf)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        code = args.fn(args)
    except (UsageError, ConfigError, SpecParseError) as exc:
        print(f"ulid {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"ulid {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
