"""Command-line driver: ``train``, ``eval``, ``make-synthetic``, ``inspect``.

Exit codes: 0 ok, 1 usage or configuration error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .data import load_ground_truth, read_manifest
from .dp import filter_occluded_segments, max_average_path, validate_path, write_path
from .embedding import load_checkpoint, standardize
from .errors import ConfigError, DataError, MatcherError, SemiStereoError, ShapeError, \
    TrainingError
from .evaluation import WtaReport, dump_similarity_image, predict_disparity_map, \
    wta_disparity, wta_error_rate
from .similarity import build_banded_similarity
from .synthetic import NOISE, TEXTURE_SIGMA, make_synthetic_dataset
from .training import TrainConfig, load_training_pairs, read_config, train, write_config

log = logging.getLogger("semistereo")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def cmd_train(args) -> int:
    config = read_config(args.config) if args.config else TrainConfig()
    overrides = {"manifest_path": str(args.manifest)}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.seed is not None:
        overrides["seed"] = args.seed
    config = TrainConfig(**{**vars(config), **overrides})
    out = Path(args.out)
    pairs = load_training_pairs(config.manifest_path, config.d_max)
    if not pairs:
        raise DataError(f"{config.manifest_path}: manifest lists no pairs")
    out.mkdir(parents=True, exist_ok=True)
    config.checkpoint_path = str(out / "checkpoint.bin")
    write_config(config, out / "config.txt")
    result = train(config, pairs, out)
    print(f"checkpoint={result.checkpoint}")
    if result.losses:
        print(f"final_loss={result.losses[-1]:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net = load_checkpoint(args.checkpoint)
    report = WtaReport()
    for entry in read_manifest(args.manifest):
        if entry.gt is None:
            log.warning("%s: no ground truth, skipped", entry.id)
            continue
        gt = load_ground_truth(entry.gt, entry.gt_format)
        pred = predict_disparity_map(net, entry.load_pair())
        pair_report = wta_error_rate(pred, gt, patch_size=net.patch_size)
        log.info("%s: %s", entry.id, pair_report.key_values())
        report = report.merge(pair_report)
    print(report.table())
    print(report.key_values())
    return EXIT_OK


def cmd_make_synthetic(args) -> int:
    manifest = make_synthetic_dataset(
        args.out, seed=args.seed, n_pairs=args.pairs, height=args.height, width=args.width,
        d_max=args.dmax, perturb=not args.no_perturb, noise=args.noise,
        texture_sigma=args.texture_sigma, constant_disparity=args.constant_disparity)
    print(f"manifest={manifest}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    net = load_checkpoint(args.checkpoint)
    entries = {e.id: e for e in read_manifest(args.manifest)}
    if args.pair not in entries:
        raise DataError(f"{args.manifest}: no pair with id {args.pair!r}")
    entry = entries[args.pair]
    pair = entry.load_pair()
    half = (net.patch_size - 1) // 2
    r = args.row - half
    if not 0 <= r < pair.shape[0] - 2 * half:
        raise ConfigError(f"row {args.row} outside [{half}, {pair.shape[0] - half - 1}]")
    band = slice(r, r + net.patch_size)
    left, _ = net.forward(standardize(pair.left)[band])
    right, _ = net.forward(standardize(pair.right)[band])
    s = build_banded_similarity(left[0], right[0], pair.d_max)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_similarity_image(s, out / "similarity.pgm")
    path = filter_occluded_segments(max_average_path(s), args.t_occ)
    problems = validate_path(path, s)
    if problems:
        raise MatcherError("; ".join(problems))
    with open(out / "path.txt", "w") as fh:
        write_path(path, fh)
    print(f"similarity={out / 'similarity.pgm'}")
    print(f"path={out / 'path.txt'}")
    print(f"path_mean={path.mean_energy:.6f}")
    if entry.gt is not None:
        gt = load_ground_truth(entry.gt, entry.gt_format)
        cols = np.arange(s.width) + half
        ok = gt.evaluable()[args.row, cols]
        if ok.sum() > 1:
            # descriptor index of the true match against the WTA match
            true_j = np.arange(s.width) - gt.values[args.row, cols]
            pred_j = np.arange(s.width) - wta_disparity(s)
            rho = spearmanr(pred_j[ok], true_j[ok]).statistic
            print(f"rank_correlation={rho:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="semistereo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="learn a metric from unlabeled pairs")
    p.add_argument("--config", help="key=value file mirroring TrainConfig")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="WTA 3-pixel error over a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("make-synthetic", help="write a synthetic stereo dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pairs", type=int, default=20)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--dmax", type=int, default=16)
    p.add_argument("--no-perturb", action="store_true", help="skip brightness perturbation")
    p.add_argument("--noise", type=float, default=NOISE)
    p.add_argument("--texture-sigma", type=float, default=TEXTURE_SIGMA)
    p.add_argument("--constant-disparity", type=int)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("inspect", help="dump one row's similarity matrix and DP path")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--pair", required=True, help="pair id (left image stem)")
    p.add_argument("--row", type=int, required=True, help="image row")
    p.add_argument("--out", required=True)
    p.add_argument("--t-occ", type=int, default=3)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:  # DataError included
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, MatcherError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SemiStereoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
