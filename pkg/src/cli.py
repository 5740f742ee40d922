"""
Command-line interface.

    birdsong [global flags] fetch --species NAME [--limit N] [--dest DIR]
    birdsong [global flags] preprocess
    birdsong [global flags] train [--kind knn|forest|cnn]
    birdsong [global flags] evaluate [--cross-validate]
    birdsong [global flags] ablate [--plan LABEL ...]
    birdsong [global flags] predict AUDIO

Exit codes: 0 success, 1 configuration error / missing artifact / unknown
model kind, 2 partial failure (fetch or preprocess).
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from . import services
from .app import configure_logging
from .archive import fetch_recordings
from .config import PipelineConfig, load_config
from .errors import ApiSchemaChanged, BirdsongError, ConfigError, NetworkError
from .models import plans_from_label
from .reports import ablation_table, metrics_table, per_class_table

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARTIAL = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='birdsong',
        description="Bird species classification from audio recordings",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Configuration precedence (lowest to highest):
  built-in defaults < --config TOML file < environment (.env, BIRDSONG_CACHE,
  BIRDSONG_ARCHIVE_URL, LOG_LEVEL, LOG_DIR) < command-line flags

Examples:
  %(prog)s fetch --species "Grey Butcherbird" --limit 20
  %(prog)s --config pipeline.toml preprocess
  %(prog)s --config pipeline.toml --seed 7 train --kind forest
  %(prog)s --config pipeline.toml --paper-mode evaluate --cross-validate
  %(prog)s --config pipeline.toml predict recording.wav
        """
    )
    parser.add_argument('--config', '-c', type=Path, help='TOML configuration file')
    parser.add_argument('--seed', type=int, help='Top-level random seed')
    parser.add_argument('--jobs', '-j', type=int, help='Worker threads for per-file and per-tree work')
    parser.add_argument('--paper-mode', action='store_true', default=None,
                        help='Ungrouped clip-level splits and cross-validation')
    parser.add_argument('--log-level', help='DEBUG, INFO, WARNING or ERROR')
    parser.add_argument('--include-c0', action='store_true', default=None,
                        help='Keep MFCC coefficient 0 (frame energy) in feature vectors')

    sub = parser.add_subparsers(dest='command', required=True)

    fetch = sub.add_parser('fetch', help='Download recordings from the archive')
    fetch.add_argument('--species', required=True, help='Species name or archive query')
    fetch.add_argument('--limit', type=int, default=10, help='Maximum recordings to fetch (default: 10)')
    fetch.add_argument('--dest', type=Path, help='Destination directory (default: paths.data_dir)')

    sub.add_parser('preprocess', help='Cut, augment and render recordings into the cache')

    train = sub.add_parser('train', help='Train the configured model')
    train.add_argument('--kind', help='Override model.kind (knn, forest or cnn)')

    evaluate = sub.add_parser('evaluate', help='Evaluate the trained model on the test partition')
    evaluate.add_argument('--cross-validate', action='store_true',
                          help='k-fold cross-validation over the cache instead of the trained artifact')
    evaluate.add_argument('--kind', help='Override model.kind for cross-validation')

    ablate = sub.add_parser('ablate', help='Train one model per augmentation plan')
    ablate.add_argument('--plan', action='append', default=[],
                        help='Plan label such as "5s origin + 2s stride" (repeatable; default: configured plans)')
    ablate.add_argument('--kind', help='Override model.kind')

    predict = sub.add_parser('predict', help='Classify one recording')
    predict.add_argument('audio', type=Path, help='Audio file to classify')
    return parser


def configure_from_args(args: argparse.Namespace) -> PipelineConfig:
    overrides: Dict[str, Any] = {
        'seed': args.seed,
        'jobs': args.jobs,
        'paper_mode': args.paper_mode,
        'log_level': args.log_level,
        'features.include_c0': args.include_c0,
        'model.kind': getattr(args, 'kind', None),
    }
    return load_config(args.config, overrides)


def cmd_fetch(args: argparse.Namespace, config: PipelineConfig) -> int:
    dest = args.dest or config.paths.data_dir
    try:
        entries = fetch_recordings(args.species, dest, args.limit, config.archive)
    except (NetworkError, ApiSchemaChanged) as e:
        logger.error(f"Fetch failed: {str(e)}")
        print(f"Fetch failed: {str(e)}", file=sys.stderr)
        return EXIT_PARTIAL
    print(f"{len(entries)} recording(s) of {args.species!r} in {dest}")
    return EXIT_OK


def cmd_preprocess(args: argparse.Namespace, config: PipelineConfig) -> int:
    summary = services.preprocess(config)
    print("Clips per class:")
    for label, count in summary.clip_counts.items():
        print(f"  {label}: {count}")
    print(f"Total: {summary.n_clips} clips, {summary.n_images} images "
          f"({summary.n_filtered} filtered), {summary.n_features} feature vectors")
    if summary.failures:
        print(f"{len(summary.failures)} failure(s):")
        for recording_id, message in sorted(summary.failures.items()):
            print(f"  {recording_id}: {message}")
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_train(args: argparse.Namespace, config: PipelineConfig) -> int:
    summary = services.train(config)
    print(f"Trained {summary.kind} on {summary.n_train} items ({summary.n_val} validation)")
    if summary.history:
        print(f"Best epoch {summary.history['best_epoch']} of {summary.history['stopped_epoch']}")
    print(f"Model written to {summary.model_path}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace, config: PipelineConfig) -> int:
    if args.cross_validate:
        report = services.cross_validate(config)
        name = 'cv (paper mode)' if config.paper_mode else 'cv (grouped)'
    else:
        report = services.evaluate(config)
        name = 'test'
    print(metrics_table({name: report}))
    print()
    print(per_class_table(report))
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace, config: PipelineConfig) -> int:
    plans = [plan for label in args.plan for plan in plans_from_label(label)] or None
    rows = services.ablate(config, plans=plans)
    print(ablation_table(rows))
    return EXIT_OK


def cmd_predict(args: argparse.Namespace, config: PipelineConfig) -> int:
    prediction = services.predict(config, args.audio)
    print(f"{prediction.source}: {prediction.verdict} ({prediction.n_clips} clips)")
    for rank, (label, probability) in enumerate(prediction.ranking, start=1):
        print(f"  {rank:2d}. {label:<30} {probability:.4f}")
    return EXIT_OK


COMMANDS = {
    'fetch': cmd_fetch,
    'preprocess': cmd_preprocess,
    'train': cmd_train,
    'evaluate': cmd_evaluate,
    'ablate': cmd_ablate,
    'predict': cmd_predict,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = configure_from_args(args)
    except ConfigError as e:
        configure_logging(args.log_level)
        logger.error(f"Configuration error: {str(e)}")
        print(f"Configuration error: {str(e)}", file=sys.stderr)
        return EXIT_ERROR
    configure_logging(config.log_level, config.log_dir or config.paths.output_dir / 'logs')
    logger.info(f"Running {args.command} with seed {config.seed}")

    try:
        return COMMANDS[args.command](args, config)
    except FileNotFoundError as e:
        logger.error(str(e))
        print(f"Error: {str(e)}", file=sys.stderr)
        return EXIT_ERROR
    except (BirdsongError, ValueError) as e:
        logger.error(f"{args.command} failed: {str(e)}")
        print(f"Error: {str(e)}", file=sys.stderr)
        return EXIT_ERROR
