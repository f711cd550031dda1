"""Experiment runner and CLI.

Experiments are described by a flat JSON config (schema version 1); CLI
``--set key=value`` flags override config keys. Verbs:

* ``run``            one experiment, emits metrics.csv + summary.json
* ``suite``          a grid of experiments + comparison table + SVG plots
* ``verify-bounds``  stream with a dense oracle checking the cumulative
                     factorization-error bound each batch
* ``fetch-data``     download the real benchmark datasets (network required)

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import statistics
import sys
import urllib.request
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import data as data_mod
from . import gp as gp_mod
from . import hyperopt as hyp_mod
from .errors import ConfigError, DataError, SeqGpError
from .kernels import KernelSpec, PolyDistance, SquaredExponential, kernel_matrix
from .metrics import BatchRecord, StreamMetrics
from .rla import SketchParams, cumulative_error_bound

CONFIG_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat experiment description; see README for the key reference."""

    schema_version: int = CONFIG_SCHEMA_VERSION
    name: str = "experiment"
    # data
    dataset: str = "synthetic:smooth"
    schema: str = "abalone"  # abalone | sarcos | numeric
    target_column: int = -1  # for schema == numeric
    synthetic_n: int = 500
    synthetic_d: int = 3
    synthetic_seed: int = 0
    synthetic_noise: float = 0.05
    batch_size: int = 100
    max_samples: Optional[int] = None
    labeling: str = "self_labels"
    standardize: bool = True
    # model
    engine: str = "srmf"
    kernel: str = "se"  # se | poly
    lengthscale: float = 1.0
    signal_variance: float = 1.0
    noise_variance: float = 0.01
    coeffs: Optional[list] = None  # poly start; None = scale-aware default
    m: int = 3
    # hyperopt
    mode: str = "none"
    n_steps: int = 10
    max_iters: int = 50
    objective_tolerance: float = 1e-4
    simplex_step: float = 0.5
    holdout_fraction: float = 0.0
    # sketch
    k: int = 10
    p: int = 5
    seed: int = 0
    truncate: bool = False
    init_exact_limit: int = gp_mod.DEFAULT_INIT_EXACT_LIMIT
    # outputs
    out_dir: Optional[str] = None
    plot: bool = False
    repeats: int = 1
    # verify-bounds oracle cap
    oracle_max_n: int = 2000

    def validate(self) -> "ExperimentConfig":
        if self.schema_version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(
                f"unsupported config schema version {self.schema_version}"
            )
        if self.engine not in ("nrmf", "brmf", "srmf"):
            raise ConfigError(f"unknown engine {self.engine!r}")
        if self.kernel not in ("se", "poly"):
            raise ConfigError(f"unknown kernel {self.kernel!r}")
        if self.mode not in hyp_mod.OptMode.KINDS:
            raise ConfigError(f"unknown optimization mode {self.mode!r}")
        if self.kernel == "se" and self.mode != "none":
            raise ConfigError(
                "hyperparameter optimization modes require the poly kernel"
            )
        if self.mode == "hybrid" and self.engine != "srmf":
            raise ConfigError("hybrid mode requires the srmf engine")
        if self.labeling not in (l.value for l in gp_mod.Labeling):
            raise ConfigError(f"unknown labeling {self.labeling!r}")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.schema not in ("abalone", "sarcos", "numeric"):
            raise ConfigError(f"unknown dataset schema {self.schema!r}")
        if self.schema == "numeric" and self.target_column < 0:
            raise ConfigError("schema 'numeric' needs a target_column")
        return self

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**mapping).validate()

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **overrides).validate()

    def sketch_params(self) -> SketchParams:
        return SketchParams(k=self.k, p=self.p, rng_seed=self.seed, truncate=self.truncate)

    def kernel_spec(self, coeffs=None) -> KernelSpec:
        if self.kernel == "se":
            family = SquaredExponential(self.lengthscale, self.signal_variance)
        else:
            family = PolyDistance(tuple(coeffs if coeffs is not None else self.coeffs))
        return KernelSpec(family, self.noise_variance)

    def opt_config(self) -> hyp_mod.OptConfig:
        return hyp_mod.OptConfig(
            max_iters=self.max_iters,
            objective_tolerance=self.objective_tolerance,
            simplex_step=self.simplex_step,
            holdout_fraction=self.holdout_fraction,
        )

    def plan(self) -> data_mod.StreamPlan:
        return data_mod.StreamPlan(
            batch_size=self.batch_size,
            max_samples=self.max_samples,
            labeling=gp_mod.Labeling(self.labeling),
        )


def load_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    config = ExperimentConfig.from_mapping(raw)
    if overrides:
        config = config.with_overrides(overrides)
    return config


def parse_overrides(pairs) -> dict:
    overrides = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"override {pair!r} is not KEY=VALUE")
        try:
            overrides[key] = json.loads(value)
        except json.JSONDecodeError:
            overrides[key] = value
    return overrides


# ---------------------------------------------------------------------- #
# dataset resolution


def resolve_dataset(config: ExperimentConfig, base_dir: Optional[Path] = None):
    ref = config.dataset
    if ref.startswith("synthetic:"):
        kind = ref.split(":", 1)[1]
        if kind != "smooth":
            raise ConfigError(f"unknown synthetic dataset {kind!r}")
        return data_mod.synthetic_smooth_dataset(
            n=config.synthetic_n,
            d=config.synthetic_d,
            seed=config.synthetic_seed,
            noise=config.synthetic_noise,
        )
    path = Path(ref)
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    if config.schema == "numeric":
        schema = data_mod.CsvSchema(target_column=config.target_column)
    else:
        schema = data_mod.SCHEMAS[config.schema]
    return data_mod.load_csv(path, schema)


# ---------------------------------------------------------------------- #
# experiment execution


def run_stream(config: ExperimentConfig, dataset) -> StreamMetrics:
    """One pass over the stream described by the config."""
    plan = config.plan()
    if config.standardize:
        dataset, _ = data_mod.standardize(dataset, plan.batch_size)
    stream = data_mod.make_stream(dataset, plan)
    params = config.sketch_params()
    if config.kernel == "se" or config.mode == "none" and config.coeffs is not None:
        spec = config.kernel_spec()
        return gp_mod.stream_run(
            stream,
            spec,
            gp_mod.Engine(config.engine),
            params,
            plan.labeling,
            config.init_exact_limit,
        )
    return hyp_mod.run_mode(
        stream,
        sigma2=config.noise_variance,
        params=params,
        mode=hyp_mod.OptMode(config.mode, config.n_steps),
        engine=gp_mod.Engine(config.engine),
        m=config.m,
        opt_config=config.opt_config(),
        labeling=plan.labeling,
        initial_coeffs=config.coeffs,
        init_exact_limit=config.init_exact_limit,
    )


def run_experiment(
    config: ExperimentConfig, base_dir: Optional[Path] = None
) -> StreamMetrics:
    """Run a config, optionally several times, and write its artifacts.

    With ``repeats > 1`` the reported per-batch time is the median across
    runs; everything else comes from the first run (runs are deterministic
    apart from timing).
    """
    dataset = resolve_dataset(config, base_dir)
    runs = [run_stream(config, dataset) for _ in range(config.repeats)]
    metrics = runs[0]
    if config.repeats > 1:
        merged = StreamMetrics()
        for i, rec in enumerate(metrics.records):
            med = statistics.median(run.records[i].time_s for run in runs)
            merged.append(
                BatchRecord(rec.batch, rec.n, rec.rmse, med, rec.rank, rec.fact_error)
            )
        metrics = merged
    if config.out_dir:
        out = Path(config.out_dir) / config.name
        out.mkdir(parents=True, exist_ok=True)
        metrics.write_csv(out / "metrics.csv")
        summary = {"name": config.name, "config": asdict(config)}
        summary.update(metrics.summary())
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        if config.plot:
            _plot_metrics({config.name: metrics}, out)
    return metrics


def run_suite(suite: dict, base_dir: Optional[Path] = None) -> dict:
    """Run the experiment grid in ``suite`` and emit the comparison table."""
    if suite.get("schema_version", CONFIG_SCHEMA_VERSION) != CONFIG_SCHEMA_VERSION:
        raise ConfigError("unsupported suite schema version")
    name = suite.get("name", "suite")
    base = suite.get("base", {})
    experiments = suite.get("experiments")
    if not experiments:
        raise ConfigError("suite has no experiments")
    out_dir = base.get("out_dir")
    results = {}
    for entry in experiments:
        if "name" not in entry:
            raise ConfigError("every suite experiment needs a name")
        merged = dict(base)
        merged.update(entry)
        if out_dir:
            merged["out_dir"] = str(Path(out_dir) / name)
        config = ExperimentConfig.from_mapping(merged)
        results[config.name] = run_experiment(config, base_dir)
    table = {
        exp: {
            "mean_rmse": metrics.mean_rmse,
            "mean_time": metrics.mean_time,
            "batches": len(metrics.records),
            "final_n": metrics.records[-1].n if metrics.records else 0,
        }
        for exp, metrics in results.items()
    }
    if out_dir:
        root = Path(out_dir) / name
        root.mkdir(parents=True, exist_ok=True)
        (root / "comparison.json").write_text(json.dumps(table, indent=2, sort_keys=True))
        with (root / "comparison.csv").open("w") as fh:
            fh.write("experiment,batches,final_n,mean_rmse,mean_time\n")
            for exp, row in table.items():
                fh.write(
                    f"{exp},{row['batches']},{row['final_n']},"
                    f"{row['mean_rmse']!r},{row['mean_time']!r}\n"
                )
        _plot_metrics(results, root / "plots")
    return table


# ---------------------------------------------------------------------- #
# bound verification


@dataclass(frozen=True)
class BoundRow:
    batch: int
    n: int
    measured: float
    bound: float
    tail_singular_value: float
    min_eigenvalue: float

    @property
    def ok(self) -> bool:
        return self.measured <= self.bound


@dataclass
class BoundReport:
    rows: list

    @property
    def violations(self) -> int:
        return sum(0 if row.ok else 1 for row in self.rows)

    def to_dict(self) -> dict:
        return {
            "violations": self.violations,
            "rows": [
                {
                    "batch": r.batch,
                    "n": r.n,
                    "measured": r.measured,
                    "bound": r.bound,
                    "tail_singular_value": r.tail_singular_value,
                    "min_eigenvalue": r.min_eigenvalue,
                    "ok": r.ok,
                }
                for r in self.rows
            ],
        }


def verify_bounds(config: ExperimentConfig, base_dir: Optional[Path] = None) -> BoundReport:
    """Stream with a dense oracle checking the cumulative error bound.

    Every batch assembles the dense kernel matrix alongside the sequential
    factor, measures the spectral reconstruction error, and compares it with
    the accumulated bound ``2 sum_t (1 + 9 sqrt((k+p) n_t)) s_{k+1}(K_t)``.
    Capped at ``oracle_max_n`` points since the oracle is cubic.
    """
    if config.kernel == "poly" and config.coeffs is None:
        raise ConfigError("verify-bounds with the poly kernel needs fixed coeffs")
    dataset = resolve_dataset(config, base_dir)
    plan = config.plan()
    if config.standardize:
        dataset, _ = data_mod.standardize(dataset, plan.batch_size)
    params = config.sketch_params()
    spec = config.kernel_spec()
    state = gp_mod.GpState(spec, gp_mod.Engine.SRMF, params, config.init_exact_limit)
    spectra = []
    rows = []
    for index, (X_b, y_b) in enumerate(data_mod.make_stream(dataset, plan), start=1):
        if state.n + len(X_b) > config.oracle_max_n:
            break
        state.absorb_batch(X_b, y_b)
        dense = kernel_matrix(state.X, spec)
        eigs = np.linalg.eigvalsh(dense)
        spectra.append(np.sort(np.abs(eigs))[::-1])
        resid = dense - state.factor.dense()
        measured = float(np.abs(np.linalg.eigvalsh(resid)).max())
        bound = cumulative_error_bound(params.width, params.k, spectra)
        tail = (
            float(spectra[-1][params.k]) if params.k < spectra[-1].size else 0.0
        )
        rows.append(
            BoundRow(
                batch=index,
                n=state.n,
                measured=measured,
                bound=bound,
                tail_singular_value=tail,
                min_eigenvalue=float(eigs.min()),
            )
        )
    report = BoundReport(rows)
    if config.out_dir:
        out = Path(config.out_dir) / config.name
        out.mkdir(parents=True, exist_ok=True)
        (out / "bounds.json").write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True)
        )
    return report


# ---------------------------------------------------------------------- #
# plots


def _plot_metrics(results: dict, out_dir: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "seqgp"
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    panels = (
        ("time_per_batch.svg", "wall time per batch [s]", StreamMetrics.time_series),
        ("rmse_per_batch.svg", "RMSE per batch", StreamMetrics.rmse_series),
    )
    for filename, ylabel, series in panels:
        fig, ax = plt.subplots(figsize=(6.0, 3.6))
        for name, metrics in results.items():
            points = series(metrics)
            if not points:
                continue
            xs, ys = zip(*points)
            ax.plot(xs, ys, marker=".", label=name)
        ax.set_xlabel("batch")
        ax.set_ylabel(ylabel)
        ax.legend(loc="best", fontsize="small")
        fig.tight_layout()
        fig.savefig(out_dir / filename, format="svg")
        plt.close(fig)


# ---------------------------------------------------------------------- #
# dataset fetching


DATASET_URLS = {
    "abalone": "https://archive.ics.uci.edu/ml/machine-learning-databases/abalone/abalone.data",
    "sarcos": "https://gaussianprocess.org/gpml/data/sarcos_inv.mat",
}


def fetch_data(dest, which: str = "all", expected_sha256: Optional[dict] = None) -> dict:
    """Download the benchmark datasets and convert them to package CSVs.

    Checksums are trust-on-first-use: each download records its sha256 in a
    sidecar file and later fetches must match it (or the explicitly supplied
    digest).
    """
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    expected_sha256 = expected_sha256 or {}
    names = list(DATASET_URLS) if which == "all" else [which]
    written = {}
    for name in names:
        if name not in DATASET_URLS:
            raise DataError(f"unknown dataset {name!r}")
        url = DATASET_URLS[name]
        raw = dest / Path(url).name
        try:
            with urllib.request.urlopen(url, timeout=60) as response:
                payload = response.read()
        except OSError as exc:
            raise DataError(f"failed to download {url}: {exc}") from exc
        digest = hashlib.sha256(payload).hexdigest()
        pin = expected_sha256.get(name)
        sidecar = raw.with_suffix(raw.suffix + ".sha256")
        if pin is None and sidecar.exists():
            pin = sidecar.read_text().strip()
        if pin and pin != digest:
            raise DataError(f"{name}: sha256 mismatch (expected {pin}, got {digest})")
        raw.write_bytes(payload)
        sidecar.write_text(digest + "\n")
        if name == "sarcos":
            csv_path = dest / "sarcos.csv"
            _sarcos_mat_to_csv(raw, csv_path)
        else:
            csv_path = dest / "abalone.csv"
            csv_path.write_bytes(payload)
        written[name] = {"path": str(csv_path), "sha256": digest}
    return written


def _sarcos_mat_to_csv(mat_path: Path, csv_path: Path) -> None:
    # keep the 21 inputs plus the first torque column (column 22)
    import scipy.io

    mat = scipy.io.loadmat(mat_path)
    keys = [key for key in mat if not key.startswith("__")]
    if not keys:
        raise DataError(f"{mat_path} holds no matrix")
    table = np.asarray(mat[keys[0]], dtype=float)[:, :22]
    np.savetxt(csv_path, table, delimiter=",", fmt="%.8g")


# ---------------------------------------------------------------------- #
# CLI


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqgp-bench",
        description="Streaming GP benchmark runner",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config key (repeatable)",
        )
        p.add_argument("--out-dir", help="override the output directory")

    run_p = sub.add_parser("run", help="run one experiment")
    add_config_args(run_p)
    run_p.add_argument("--repeats", type=int, help="timing repeats (median reported)")

    suite_p = sub.add_parser("suite", help="run an experiment grid")
    suite_p.add_argument("--config", required=True, help="JSON suite file")
    suite_p.add_argument("--out-dir", help="override the suite output directory")

    vb_p = sub.add_parser("verify-bounds", help="dense-oracle bound check")
    add_config_args(vb_p)

    fd_p = sub.add_parser("fetch-data", help="download the benchmark datasets")
    fd_p.add_argument("--dest", required=True)
    fd_p.add_argument("--dataset", default="all", choices=["all", "abalone", "sarcos"])
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            overrides = parse_overrides(args.overrides)
            if args.out_dir:
                overrides["out_dir"] = args.out_dir
            if args.repeats:
                overrides["repeats"] = args.repeats
            config = load_config(args.config, overrides)
            metrics = run_experiment(config, Path(args.config).resolve().parent)
            summary = {"name": config.name}
            summary.update(metrics.summary())
            print(json.dumps(summary, indent=2, sort_keys=True))
        elif args.command == "suite":
            path = Path(args.config)
            if not path.exists():
                raise ConfigError(f"suite file not found: {path}")
            try:
                suite = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
            if args.out_dir:
                suite.setdefault("base", {})["out_dir"] = args.out_dir
            table = run_suite(suite, path.resolve().parent)
            print(json.dumps(table, indent=2, sort_keys=True))
        elif args.command == "verify-bounds":
            overrides = parse_overrides(args.overrides)
            if args.out_dir:
                overrides["out_dir"] = args.out_dir
            config = load_config(args.config, overrides)
            report = verify_bounds(config, Path(args.config).resolve().parent)
            print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
            if report.violations:
                print(
                    f"bound violated in {report.violations} of {len(report.rows)} batches",
                    file=sys.stderr,
                )
                return 4
        elif args.command == "fetch-data":
            written = fetch_data(args.dest, args.dataset)
            print(json.dumps(written, indent=2, sort_keys=True))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (SeqGpError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
