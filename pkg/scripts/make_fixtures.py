"""Regenerate the packaged fixture corpus under src/ttm/resources/fixtures."""

import argparse
from pathlib import Path

from ttm.synthetic import write_fixture_corpus

ROOT = Path(__file__).resolve().parents[1] / "src" / "ttm" / "resources" / "fixtures"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=ROOT)
    args = ap.parse_args()
    write_fixture_corpus(args.out, seed=args.seed)
    for p in sorted(args.out.iterdir()):
        print(p)


if __name__ == "__main__":
    main()
