"""Per-batch metrics collected by streaming runs."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

CSV_COLUMNS = ("batch", "n", "rmse", "time_s", "rank", "fact_error")


@dataclass(frozen=True)
class BatchRecord:
    batch: int
    n: int
    rmse: Optional[float]  # None for the warm-up batch (nothing to predict)
    time_s: float
    rank: int
    fact_error: Optional[float] = None


@dataclass
class StreamMetrics:
    records: list = field(default_factory=list)

    def append(self, record: BatchRecord) -> None:
        self.records.append(record)

    @property
    def mean_rmse(self) -> float:
        vals = [r.rmse for r in self.records if r.rmse is not None]
        return float(sum(vals) / len(vals)) if vals else math.nan

    @property
    def mean_time(self) -> float:
        if not self.records:
            return math.nan
        return float(sum(r.time_s for r in self.records) / len(self.records))

    @property
    def final_rmse(self) -> float:
        for rec in reversed(self.records):
            if rec.rmse is not None:
                return rec.rmse
        return math.nan

    def rmse_series(self):
        return [(r.batch, r.rmse) for r in self.records if r.rmse is not None]

    def time_series(self):
        return [(r.batch, r.time_s) for r in self.records]

    def n_series(self):
        return [(r.batch, r.n) for r in self.records]

    def summary(self) -> dict:
        return {
            "batches": len(self.records),
            "mean_rmse": self.mean_rmse,
            "mean_time": self.mean_time,
            "final_rmse": self.final_rmse,
            "final_n": self.records[-1].n if self.records else 0,
        }

    def write_csv(self, path) -> None:
        """Fixed column order; floats via repr so reruns are byte-identical."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for r in self.records:
                writer.writerow(
                    [
                        r.batch,
                        r.n,
                        "" if r.rmse is None else repr(r.rmse),
                        repr(r.time_s),
                        r.rank,
                        "" if r.fact_error is None else repr(r.fact_error),
                    ]
                )


def read_metrics_csv(path) -> StreamMetrics:
    metrics = StreamMetrics()
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            metrics.append(
                BatchRecord(
                    batch=int(row["batch"]),
                    n=int(row["n"]),
                    rmse=float(row["rmse"]) if row["rmse"] else None,
                    time_s=float(row["time_s"]),
                    rank=int(row["rank"]),
                    fact_error=float(row["fact_error"]) if row["fact_error"] else None,
                )
            )
    return metrics
