"""Command-line interface module for fpt-plus.

Copyright (C) 2024 fpt-plus Contributors

This program is free software: you can redistribute it and/or modify
it under the terms of the GNU General Public License as published by
the Free Software Foundation, either version 3 of the License, or
(at your option) any later version.

This program is distributed in the hope that it will be useful,
but WITHOUT ANY WARRANTY; without even the implied warranty of
MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
GNU General Public License for more details.

You should have received a copy of the GNU General Public License
along with this program.  If not, see <https://www.gnu.org/licenses/>.

This module provides the main entry point and binds the modules into one
tool with a subcommand per pipeline stage.

Typical Flow:
------------
1. synth     write a synthetic dataset (or bring your own labels.csv)
2. init-lpm  write seeded random backbone weights (or convert real ones)
3. preload   run the frozen backbone once, store selected features
4. train     train the side network on the cached features
5. eval      score a trained side network on a split
6. profile   parameter census, memory peaks, efficiency scores
7. viz       selection map and mask rasters for one image

Exit Codes:
----------
- 0: Success
- 1: Configuration error (missing or invalid config, unknown key, cache fingerprint mismatch)
- 2: Data error (unreadable image or labels, missing cache record, failed preload items)
- 3: Numeric or contract failure (NaN, shape mismatch, undefined metric)
- 99: Unexpected error
- 130: User cancelled (Ctrl+C)
"""

import argparse
import logging
import os
import sys
from fractions import Fraction
from pathlib import Path
from typing import Dict, List

import yaml

from .adapter import SideNetwork, SideTrace, prompt_attention_profile
from .cache import CacheFile, CacheFingerprint, preload
from .config import Config
from .data import load_dataset, load_low, synth_dataset
from .errors import (
    CacheLookupError, ConfigError, ContractError, DataError, DimensionError,
    NumericError, UndefinedMetricError,
)
from .profiler import (
    component_ablation, config_census, efficiency_report, export_selection_map,
    measure_fpt_peak, measure_full_finetune_peak, measure_inference_peak,
    measure_linear_probe_peak, pme, ppe, write_prompt_profile,
)
from .tensor import no_grad
from .train import CachedFeatures, NoFeatures, evaluate, grid_search, train
from .vit import VisionTransformer
from .weights import load_weights, save_weights


def get_version():
    """Get the package version."""
    try:
        from . import __version__
        return __version__
    except ImportError:
        return "unknown"


logger = logging.getLogger(__name__)

EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_UNEXPECTED = 99
EXIT_CANCELLED = 130


def _add_config_args(parser):
    parser.add_argument(
        '--config',
        type=str,
        help='Path to YAML configuration file (built-in defaults when omitted)'
    )
    parser.add_argument(
        '--set',
        dest='overrides',
        action='append',
        default=[],
        metavar='SECTION.KEY=VALUE',
        help='Override one configuration value (repeatable)'
    )


def build_parser():
    """Build the argument parser.

    Returns:
        argparse.ArgumentParser: Parser with one subcommand per stage
    """
    parser = argparse.ArgumentParser(
        prog='fpt-plus',
        description='Frozen high-resolution backbone with fine-grained prompts and a small side network',
        epilog='''
Examples:
  # Synthetic data, random backbone, preload, train, evaluate
  fpt-plus synth --out data --n 200 --classes 2 --high-res 256 --seed 0
  fpt-plus init-lpm --config fpt.yaml --out lpm.fptw
  fpt-plus preload --data data --weights lpm.fptw --config fpt.yaml --out data.fptc
  fpt-plus train --data data --cache data.fptc --config fpt.yaml --out side.fptw --log metrics.csv
  fpt-plus eval --data data --cache data.fptc --config fpt.yaml --model side.fptw --split test

  # Efficiency scores from given values
  fpt-plus profile --table1 87.12 0.0103 736/23128
        ''',
        formatter_class=argparse.RawDescriptionHelpFormatter
    )
    parser.add_argument(
        '--verbose', '-v',
        action='store_true',
        help='Enable verbose logging (DEBUG level)'
    )
    parser.add_argument(
        '--version',
        action='version',
        version=f'%(prog)s {get_version()}'
    )
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', help='Write a synthetic stamp-detection dataset')
    p.add_argument('--out', required=True, help='Output directory')
    p.add_argument('--n', type=int, required=True, help='Number of images')
    p.add_argument('--classes', type=int, default=2, help='Number of classes (default: 2)')
    p.add_argument('--high-res', type=int, default=512, help='Image side in pixels (default: 512)')
    p.add_argument('--seed', type=int, default=0, help='Generator seed (default: 0)')
    p.add_argument('--val-fraction', type=float, default=0.1, help='Share of val images (default: 0.1)')
    p.add_argument('--test-fraction', type=float, default=0.2, help='Share of test images (default: 0.2)')
    p.add_argument('--stamp', type=int, default=32, help='Stamp side in pixels (default: 32)')

    p = sub.add_parser('init-lpm', help='Write seeded random backbone weights')
    _add_config_args(p)
    p.add_argument('--out', required=True, help='Output weight file (FPTW)')
    p.add_argument('--seed', type=int, default=0, help='Initialization seed (default: 0)')

    p = sub.add_parser('preload', help='Store selected backbone features for a dataset')
    _add_config_args(p)
    p.add_argument('--data', required=True, help='Dataset directory with labels.csv')
    p.add_argument('--weights', required=True, help='Backbone weight file (FPTW)')
    p.add_argument('--out', required=True, help='Output feature cache (FPTC)')

    p = sub.add_parser('train', help='Train the side network')
    _add_config_args(p)
    p.add_argument('--data', required=True, help='Dataset directory with labels.csv')
    p.add_argument('--cache', help='Feature cache (FPTC); not needed with side.fusion=false')
    p.add_argument('--out', required=True, help='Output side-network weights (FPTW)')
    p.add_argument('--log', help='Metrics CSV (epoch,split,loss,auc)')

    p = sub.add_parser('sweep', help='Grid search over train settings, best by validation AUC')
    _add_config_args(p)
    p.add_argument('--data', required=True, help='Dataset directory with labels.csv')
    p.add_argument('--cache', help='Feature cache (FPTC)')
    p.add_argument('--grid', action='append', required=True, metavar='train.KEY=V1,V2',
                   help='Candidate values for one train setting (repeatable)')

    p = sub.add_parser('eval', help='Evaluate trained side-network weights on a split')
    _add_config_args(p)
    p.add_argument('--data', required=True, help='Dataset directory with labels.csv')
    p.add_argument('--cache', help='Feature cache (FPTC)')
    p.add_argument('--model', required=True, help='Side-network weights (FPTW)')
    p.add_argument('--split', default='test', choices=['train', 'val', 'test'], help='Split (default: test)')

    p = sub.add_parser('profile', help='Parameter census, memory peaks and efficiency scores')
    _add_config_args(p)
    p.add_argument('--table1', nargs=3, metavar=('SCORE', 'R', 'M'),
                   help='Compute PPE/PME from a score, parameter ratio and memory ratio (fractions like 736/23128 allowed)')
    p.add_argument('--score', type=float, help='Task score used for PPE/PME of this configuration')
    p.add_argument('--measure', action='store_true', help='Measure training-step memory peaks')
    p.add_argument('--ablation', action='store_true', help='Memory peaks as components are added')
    p.add_argument('--batch', type=int, default=1, help='Batch size for memory peaks (default: 1)')

    p = sub.add_parser('viz', help='Export the token-selection map of one image')
    _add_config_args(p)
    p.add_argument('--image', required=True, help='Image id as stored in the cache (path relative to --data)')
    p.add_argument('--cache', required=True, help='Feature cache (FPTC)')
    p.add_argument('--out', required=True, help='Output PGM; the mask goes to <stem>_mask.pgm')
    p.add_argument('--data', default='.', help='Dataset directory the image id is relative to')
    p.add_argument('--model', help='Side-network weights; enables prompt-attention values')
    p.add_argument('--layer', type=int, help='Backbone layer to show (default: deepest paired layer)')
    p.add_argument('--profile', help='Also write the per-layer prompt-attention CSV here')

    return parser


def parse_arguments(argv=None):
    """Parse command-line arguments.

    Returns:
        argparse.Namespace: Parsed arguments
    """
    return build_parser().parse_args(argv)


def setup_logging(verbose=False):
    """Configure logging for the application.

    Args:
        verbose: If True, enable DEBUG level logging
    """
    level = logging.DEBUG if verbose else logging.INFO

    logging.basicConfig(
        level=level,
        format='%(levelname)s: %(message)s',
        handlers=[
            logging.StreamHandler(sys.stdout)
        ]
    )

    # Set Pillow logger to WARNING to reduce noise
    logging.getLogger('PIL').setLevel(logging.WARNING)


def load_config(args) -> Config:
    """Defaults, then the YAML file, then ``--set`` overrides.

    A missing config file is created with defaults and the run stops with exit code 1.
    """
    config = Config()
    config_path = getattr(args, 'config', None)
    if config_path:
        if not os.path.exists(config_path):
            logger.info(f"Configuration file not found. Creating default config at: {config_path}")
            Config.create_default_config(config_path)
            logger.info("Please review the configuration file and run again")
            sys.exit(EXIT_CONFIG)
        config.load_from_file(config_path)
        logger.debug(f"Loaded configuration from: {config_path}")
    config.merge_with_cli_args(getattr(args, 'overrides', []))
    config.validate()
    return config


def _feature_source(config: Config, cache_path):
    fpt_cfg = config.fpt_config()
    if not fpt_cfg.fusion:
        return NoFeatures()
    if not cache_path:
        raise ConfigError("--cache is required when side.fusion is enabled")
    return CachedFeatures(CacheFile.open(cache_path, CacheFingerprint.from_config(fpt_cfg)))


def parse_ratio(text: str) -> float:
    try:
        return float(Fraction(text))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"cannot interpret {text!r} as a ratio") from None


def parse_grid(entries: List[str]) -> Dict[str, list]:
    grid = {}
    for entry in entries:
        if '=' not in entry:
            raise ConfigError(f"Grid entry must look like train.key=v1,v2, got {entry!r}")
        key, values = entry.split('=', 1)
        grid[key.strip()] = [yaml.safe_load(v) for v in values.split(',') if v.strip()]
    return grid


def cmd_synth(args) -> int:
    synth_dataset(args.seed, args.n, args.classes, args.high_res, args.out,
                  val_fraction=args.val_fraction, test_fraction=args.test_fraction, stamp=args.stamp)
    return 0


def cmd_init_lpm(args) -> int:
    config = load_config(args)
    lpm = VisionTransformer.initialize(config.fpt_config().lpm, "lpm/", args.seed)
    save_weights(args.out, lpm.params)
    logger.info(f"Backbone with {lpm.param_count():,} parameters written to {args.out}")
    return 0


def cmd_preload(args) -> int:
    config = load_config(args)
    fpt_cfg = config.fpt_config()
    dataset = load_dataset(args.data, config.config.data.classes)
    lpm = VisionTransformer.from_weights(fpt_cfg.lpm, load_weights(args.weights), "lpm/").freeze()
    result = preload(dataset, lpm, fpt_cfg, args.out, *config.norm)
    for image_id, reason in result.failures:
        logger.error(f"  {image_id}: {reason}")
    return 0 if result.ok else EXIT_DATA


def cmd_train(args) -> int:
    config = load_config(args)
    fpt_cfg, train_cfg = config.fpt_config(), config.train_config()
    dataset = load_dataset(args.data, config.config.data.classes)
    features = _feature_source(config, args.cache)
    side = SideNetwork.initialize(fpt_cfg, seed=train_cfg.seed)
    result = train(side, dataset, features, train_cfg, metrics_path=args.log, norm=config.norm)
    save_weights(args.out, side.params)
    if result.best_val_auc is not None:
        logger.info(f"Best validation AUC {result.best_val_auc:.4f} at epoch {result.best_epoch}")
    return 0


def cmd_sweep(args) -> int:
    config = load_config(args)
    dataset = load_dataset(args.data, config.config.data.classes)
    features = _feature_source(config, args.cache)
    result = grid_search(config.fpt_config(), config.train_config(), parse_grid(args.grid),
                         dataset, features, norm=config.norm)
    for point, value in result.points:
        shown = "undefined" if value is None else f"{value:.4f}"
        print(f"{point}: val AUC {shown}")
    print(f"best: {result.best_point}")
    return 0


def cmd_eval(args) -> int:
    config = load_config(args)
    fpt_cfg = config.fpt_config()
    dataset = load_dataset(args.data, config.config.data.classes).split(args.split)
    features = _feature_source(config, args.cache)
    features.check(fpt_cfg, dataset.items)
    side = SideNetwork.from_weights(fpt_cfg, load_weights(args.model))
    result = evaluate(side, dataset, features, config.config.train.batch_size, config.norm)
    print(f"split={args.split} n={len(dataset)} loss={result.loss:.4f} auc={result.auc:.4f}")
    if len(result.per_class_auc) > 2:
        for c, value in enumerate(result.per_class_auc):
            print(f"  class {c}: auc={value:.4f}")
    return 0


def cmd_profile(args) -> int:
    if args.table1:
        score, r, m = float(args.table1[0]), parse_ratio(args.table1[1]), parse_ratio(args.table1[2])
        print(f"score={score:.2f} r={r:.6g} m={m:.6g} PPE={ppe(score, r):.2f} PME={pme(score, m):.2f}")
        if not (args.measure or args.ablation or args.config or args.overrides):
            return 0

    config = load_config(args)
    fpt_cfg = config.fpt_config()
    census = config_census(fpt_cfg)
    print(f"learnable={census.learnable:,} total={census.total:,} r={census.ratio:.6g} ({100 * census.ratio:.2f}%)")
    for group, count in census.groups.items():
        print(f"  {group}: {count:,}")

    peak_method = peak_full = None
    if args.measure:
        peak_method = measure_fpt_peak(fpt_cfg, args.batch)
        peak_full = measure_full_finetune_peak(fpt_cfg.lpm, fpt_cfg.num_classes, args.batch)
        print(f"peak bytes: fpt+={peak_method:,} full-ft={peak_full:,} "
              f"linear-probe={measure_linear_probe_peak(fpt_cfg.lpm, fpt_cfg.num_classes, args.batch):,} "
              f"inference={measure_inference_peak(fpt_cfg, args.batch):,}")
    if args.score is not None:
        report = efficiency_report(census, args.score, peak_method, peak_full)
        line = f"PPE={report.ppe:.2f}"
        if report.pme is not None:
            line += f" m={report.m:.6g} PME={report.pme:.2f}"
        print(line)
    if args.ablation:
        for row in component_ablation(fpt_cfg, args.batch):
            print(f"{row.name}: {row.peak_bytes:,}")
    return 0


def cmd_viz(args) -> int:
    config = load_config(args)
    fpt_cfg = config.fpt_config()
    cache = CacheFile.open(args.cache, CacheFingerprint.from_config(fpt_cfg))
    features = cache.load_record(args.image)
    layers = [f.layer_index for f in features]
    layer = args.layer if args.layer is not None else layers[-1]
    if layer not in layers:
        raise ContractError(f"layer {layer} is not stored; cached layers are {layers}")
    position = layers.index(layer)

    attention = None
    if args.model:
        side = SideNetwork.from_weights(fpt_cfg, load_weights(args.model))
        image_low = load_low(Path(args.data) / args.image, fpt_cfg.lpm.image_size, fpt_cfg.low_res,
                             fpt_cfg.lpm.channels, None, *config.norm)
        trace = SideTrace()
        with no_grad():
            side.forward(image_low, features, trace=trace)
        attention = trace.fusion_attn[position]
        if args.profile:
            write_prompt_profile(args.profile, prompt_attention_profile(side, image_low, features))
    export_selection_map(features[position], fpt_cfg.lpm.grid, args.out, attention)
    return 0


COMMANDS = {
    'synth': cmd_synth,
    'init-lpm': cmd_init_lpm,
    'preload': cmd_preload,
    'train': cmd_train,
    'sweep': cmd_sweep,
    'eval': cmd_eval,
    'profile': cmd_profile,
    'viz': cmd_viz,
}


def main(argv=None):
    """Entry point for the CLI application.

    Dispatches to the subcommand and maps error types to exit codes.
    """
    exit_code = 0
    args = None

    try:
        args = parse_arguments(argv)
        setup_logging(args.verbose)
        exit_code = COMMANDS[args.command](args)

    except KeyboardInterrupt:
        logger.info("\nOperation cancelled by user")
        exit_code = EXIT_CANCELLED

    except SystemExit:
        # Re-raise SystemExit to preserve exit code
        raise

    except (ConfigError, FileNotFoundError) as e:
        logger.error(f"Configuration error: {e}")
        exit_code = EXIT_CONFIG

    except (DataError, CacheLookupError) as e:
        logger.error(f"Data error: {e}")
        exit_code = EXIT_DATA

    except (NumericError, DimensionError, ContractError, UndefinedMetricError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        exit_code = EXIT_NUMERIC

    except Exception as e:
        logger.error(f"Unexpected error: {e}")
        if args is not None and args.verbose:
            import traceback
            logger.debug(traceback.format_exc())
        exit_code = EXIT_UNEXPECTED

    sys.exit(exit_code)
