#!/usr/bin/env python3
"""Regenerate the committed synthetic dataset fixtures.

The real benchmark files are not redistributed; these seeded stand-ins share
their column layout so every loader, stream, and experiment config can run
against them. Fetch the real data with `seqgp-bench fetch-data`.
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from seqgp.data import synthetic_abalone_rows, synthetic_sarcos_rows, write_rows_csv

DATASETS = Path(__file__).resolve().parents[1] / "datasets"


def main() -> None:
    abalone = synthetic_abalone_rows(4000, seed=20240817)
    write_rows_csv(abalone, DATASETS / "abalone_synth_4000.csv")
    write_rows_csv(abalone[:200], DATASETS / "abalone_synth_200.csv")
    sarcos = synthetic_sarcos_rows(200, seed=20240818)
    write_rows_csv(sarcos, DATASETS / "sarcos_synth_200.csv")
    print(f"wrote fixtures under {DATASETS}")


if __name__ == "__main__":
    main()
