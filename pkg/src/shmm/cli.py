"""Command line entry point: ``shmm <subcommand> [--config FILE] [--set key=value ...]``.

Exit status is 0 on success, 1 on usage errors and 2 on data or format
errors.
"""

import argparse
import contextlib
import logging
import sys

import numpy as np

from . import FormatError, InfeasibleAlignmentError, UsageError
from .aud import (
    LabeledCorpus,
    decode_corpus,
    default_subspace_dim,
    discover_units,
    estimate_subspace,
    prepare_discovery,
)
from .config import resolve_config
from .formats import (
    read_alignments,
    read_feature_archive,
    read_inventory,
    read_transcripts,
    write_alignments,
    write_inventory,
)
from .gsm import SubspacePrior, load_checkpoint, save_checkpoint
from .metrics import boundary_prf, equivalent_per, format_report, load_phone_map, timit_phone_map
from .synthetic import generate_synthetic, write_synthetic
from .training import DivergenceError

EXIT_USAGE = 1
EXIT_DATA = 2


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _open_log(path):
    if not path:
        return contextlib.nullcontext()
    return open(path, "w", encoding="utf-8", newline="\n")


def _archive(path):
    try:
        return read_feature_archive(path)
    except OSError as err:
        raise DataError(f"cannot read {path}: {err.strerror}") from None


def _load(fn, path, *args):
    try:
        return fn(path, *args)
    except OSError as err:
        raise DataError(f"cannot read {path}: {err.strerror}") from None


def _in_memory(archive):
    return {utt: np.asarray(x, dtype=np.float64) for utt, x in archive.items()}


def cmd_gen_synth(args, config):
    corpus = generate_synthetic(config.synth_spec(), config.seed)
    paths = write_synthetic(corpus, args.out_dir)
    for lang, base in paths.items():
        print(f"{lang}\t{base}.sfea\t{base}.trans\t{base}.ali")


def cmd_train_subspace(args, config):
    corpora = []
    feature_dim = None
    for lang, feats_path, trans_path in args.corpus:
        archive = _archive(feats_path)
        if feature_dim not in (None, archive.feature_dim):
            raise DataError(f"{feats_path}: feature dimension {archive.feature_dim} != {feature_dim}")
        feature_dim = archive.feature_dim
        transcripts = _load(read_transcripts, trans_path)
        missing = [u for u in transcripts if u not in archive]
        if missing:
            raise DataError(f"{trans_path}: utterances without features: {', '.join(missing[:5])}")
        corpora.append(LabeledCorpus(lang, _in_memory(archive), transcripts))
    if config.feature_dim and config.feature_dim != feature_dim:
        raise UsageError(f"feature_dim {config.feature_dim} does not match the archives ({feature_dim})")
    layout = config.layout(feature_dim)
    S = config.subspace_dim or default_subspace_dim(len(corpora))
    with _open_log(args.log) as log_file:
        result = estimate_subspace(
            corpora,
            S,
            layout,
            config.training(),
            SubspacePrior(config.sigma2_w),
            config.self_loop_prob,
            config.init_scale,
            config.init_log_var,
            log_file=log_file,
        )
    save_checkpoint(args.out, result.zeta)
    print(f"saved {args.out}: S={S} D={layout.psi_dim} units={len(result.zeta.unit_ids)}")


def cmd_discover(args, config):
    subspace = _load(load_checkpoint, args.checkpoint)
    archive = _archive(args.features)
    if archive.feature_dim != subspace.layout.feature_dim:
        raise DataError("feature dimension of the archive does not match the checkpoint")
    if len(archive) == 0:
        raise DataError(f"{args.features}: no utterances")
    zeta = prepare_discovery(subspace, config.num_units)
    with _open_log(args.log) as log_file:
        result = discover_units(
            _in_memory(archive),
            zeta,
            config.training(),
            SubspacePrior(config.sigma2_w),
            config.freeze_subspace,
            config.self_loop_prob,
            log_file=log_file,
            workers=config.workers,
            restarts=config.restarts,
        )
    save_checkpoint(args.out_checkpoint, result.zeta)
    write_alignments(args.out_alignments, result.alignments)
    if args.out_inventory:
        write_inventory(args.out_inventory, result.unit_ids)
    print(f"discovered {len(result.unit_ids)} units over {len(archive)} utterances")


def cmd_decode(args, config):
    zeta = _load(load_checkpoint, args.checkpoint)
    archive = _archive(args.features)
    if archive.feature_dim != zeta.layout.feature_dim:
        raise DataError("feature dimension of the archive does not match the checkpoint")
    units = _load(read_inventory, args.inventory) if args.inventory else None
    alignments = decode_corpus(_in_memory(archive), zeta, units, config.self_loop_prob)
    write_alignments(args.out, alignments)


def _phone_map(config):
    if not config.phone_map:
        return None
    if config.phone_map == "timit":
        return timit_phone_map()
    return _load(load_phone_map, config.phone_map)


def cmd_score_per(args, config):
    hyp = _load(read_alignments, args.hyp, True)
    ref = _load(read_alignments, args.ref, False)
    report = equivalent_per(hyp, ref, _phone_map(config), config.collapse_repeats)
    sys.stdout.write(format_report(report, tsv=args.tsv))


def cmd_score_boundaries(args, config):
    hyp = _load(read_alignments, args.hyp, True)
    ref = _load(read_alignments, args.ref, False)
    score = boundary_prf(hyp, ref, config.tolerance)
    sys.stdout.write(format_report(boundaries=score, tsv=args.tsv))


def cmd_inspect(args, config):
    zeta = _load(load_checkpoint, args.checkpoint)
    lay = zeta.layout
    print(f"S\t{zeta.subspace_dim}")
    print(f"D\t{lay.psi_dim}")
    print(f"K\t{lay.num_components}")
    print(f"F\t{lay.feature_dim}")
    print(f"states\t{lay.num_states}")
    print(f"units\t{len(zeta.unit_ids)}")


def build_parser():
    parser = _Parser(prog="shmm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        p.set_defaults(func=func)
        return p

    p = add("gen-synth", cmd_gen_synth, "write a synthetic corpus and its ground truth")
    p.add_argument("--out-dir", required=True)

    p = add("train-subspace", cmd_train_subspace, "estimate the subspace on labeled corpora")
    p.add_argument("--corpus", nargs=3, action="append", required=True, metavar=("LANG", "FEATS", "TRANS"))
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--log", help="training log (tab-separated, one line per round)")

    p = add("discover", cmd_discover, "discover acoustic units on an unlabeled archive")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--out-alignments", required=True)
    p.add_argument("--out-inventory")
    p.add_argument("--log")

    p = add("decode", cmd_decode, "Viterbi-decode an archive with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--inventory", help="restrict decoding to these units")
    p.add_argument("--out", required=True)

    for name, func in (("score-per", cmd_score_per), ("score-boundaries", cmd_score_boundaries)):
        p = add(name, func, "score hypothesis alignments against a reference")
        p.add_argument("--hyp", required=True)
        p.add_argument("--ref", required=True)
        p.add_argument("--tsv", action="store_true", help="tab-separated output")

    p = add("inspect", cmd_inspect, "summarise a checkpoint")
    p.add_argument("checkpoint")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        try:
            config = resolve_config(args.config, args.set)
        except OSError as err:
            raise UsageError(f"cannot read config {args.config}: {err.strerror}") from None
        args.func(args, config)
    except UsageError as err:
        print(f"shmm: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, InfeasibleAlignmentError, DivergenceError) as err:
        print(f"shmm: error: {err}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
