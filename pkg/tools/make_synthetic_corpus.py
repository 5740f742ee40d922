#!/usr/bin/env python3
"""
Synthetic corpus script for the birdsong pipeline.
Writes a five-species WAV corpus plus manifest.csv that the CLI can
preprocess, train and evaluate on without network access.
"""

import argparse
import sys
from pathlib import Path

# Add the parent directory to the Python path so we can import the package
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.app import configure_logging
from src.synthetic import SPECIES, make_corpus


def main() -> None:
    """Generate the corpus and print a short summary."""
    parser = argparse.ArgumentParser(description="Write a synthetic birdsong corpus")
    parser.add_argument('--dest', '-d', type=Path, default=Path('data/synthetic'),
                        help='Output directory (default: data/synthetic)')
    parser.add_argument('--per-species', '-n', type=int, default=40,
                        help='Recordings per species (default: 40)')
    parser.add_argument('--duration', type=float, default=8.0,
                        help='Recording length in seconds (default: 8.0)')
    parser.add_argument('--seed', type=int, default=0, help='Random seed (default: 0)')
    parser.add_argument('--species', action='append', choices=sorted(SPECIES),
                        help='Restrict to the given species (repeatable)')
    args = parser.parse_args()

    configure_logging()

    print("=" * 50)
    print("🐦 Synthetic Birdsong Corpus")
    print("=" * 50)
    print(f"Destination: {args.dest}")
    print(f"Recordings per species: {args.per_species}")
    print(f"Duration: {args.duration} s")
    print("=" * 50)

    try:
        manifest = make_corpus(args.dest, args.per_species, args.duration, args.seed, args.species)
    except (OSError, ValueError) as e:
        print(f"❌ Failed to write corpus: {e}")
        sys.exit(1)

    print(f"✅ Wrote {len(manifest.entries)} recordings for {len(manifest.class_table)} species")
    print(f"📄 Manifest: {args.dest / 'manifest.csv'}")
    print(f"\nNext: python main.py --config <config.toml> preprocess")


if __name__ == '__main__':
    main()
