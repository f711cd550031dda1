"""Hyperparameter optimization for the polynomial-distance kernel.

The kernel ``K_a = a0 I + sum a_i D^i`` is affine in its coefficients while
the distance powers ``D^i`` depend only on the data. Keeping a low-rank
factor of each ``D^i`` therefore lets us re-assemble the regularized inverse
for any candidate coefficient vector without touching the data again: the
base term ``(a0 + s2) I`` is inverted directly and each factored term is
folded in through one Woodbury step with a small inner solve.

Optimization runs Nelder-Mead on the log-coefficients, which keeps every
iterate strictly positive; the objective is the in-sample prediction RMSE of
the absorbed training data.
"""

from __future__ import annotations

import csv
import itertools
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import scipy.linalg
import scipy.optimize

from .errors import ConstraintError, DimensionError, SeqGpError, SingularSystemError
from .gp import (
    DEFAULT_INIT_EXACT_LIMIT,
    TAU_CLAMP,
    Engine,
    GpState,
    Labeling,
    Prediction,
    stream_run as _gp_stream_run,
)
from .kernels import (
    DistancePowerSet,
    KernelSpec,
    PolyDistance,
    cross_distances,
    pairwise_distances,
    poly_cross_kernel,
)
from .metrics import BatchRecord, StreamMetrics
from .rla import SketchParams, approx_eig, dense_factor, seq_update

# Coefficients at exactly zero enter the log-space optimizer at this floor.
COEFF_FLOOR = 1e-12
# Inner Woodbury systems with condition estimates beyond this raise.
COND_LIMIT = 1e14


@dataclass(frozen=True)
class OptConfig:
    """Optimizer budget and step sizes.

    ``simplex_step`` is the initial Nelder-Mead simplex spread in
    log-coefficient units. ``holdout_fraction`` switches the objective from
    in-sample RMSE to RMSE on a trailing fraction of the absorbed data
    (default off). ``rng_seed`` is reserved; the current optimizer is
    deterministic and does not consume randomness.
    """

    max_iters: int = 50
    objective_tolerance: float = 1e-4
    simplex_step: float = 0.5
    rng_seed: int = 0
    holdout_fraction: float = 0.0
    trace_path: Optional[str] = None

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConstraintError(f"max_iters must be >= 1, got {self.max_iters}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConstraintError(
                f"holdout_fraction must be in [0, 1), got {self.holdout_fraction}"
            )


@dataclass(frozen=True)
class OptMode:
    """When to optimize along the stream.

    * none: keep the starting coefficients throughout
    * continuous: optimize after every batch
    * initial: optimize for the first ``n_steps`` batches, then freeze
    * hybrid: initial behavior, then swap to a kernel-matrix factor stream
      for the remaining batches
    """

    kind: str
    n_steps: int = 10

    KINDS = ("none", "continuous", "initial", "hybrid")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConstraintError(f"unknown optimization mode {self.kind!r}")
        if self.n_steps < 1:
            raise ConstraintError(f"n_steps must be >= 1, got {self.n_steps}")

    def optimizes_at(self, batch: int) -> bool:
        if self.kind == "none":
            return False
        if self.kind == "continuous":
            return True
        return batch <= self.n_steps

    @classmethod
    def parse(cls, text: str) -> "OptMode":
        kind, _, steps = str(text).partition(":")
        if steps:
            return cls(kind, int(steps))
        return cls(kind)


NO_OPT = OptMode("none")
CONTINUOUS = OptMode("continuous")


@dataclass(frozen=True)
class OptResult:
    coeffs: np.ndarray
    objective: float
    initial_objective: float
    n_evals: int
    improved: bool
    collapsed: bool  # search produced no usable point; coeffs echo the start


class HyperState:
    """Distance-power factors, current coefficients, and absorbed data."""

    def __init__(
        self,
        m: int,
        sigma2: float,
        params: SketchParams,
        opt_config: Optional[OptConfig] = None,
        init_exact_limit: int = DEFAULT_INIT_EXACT_LIMIT,
        coeffs=None,
    ):
        if m < 2:
            raise ConstraintError(f"kernel needs m >= 2 coefficients, got {m}")
        if sigma2 < 0:
            raise ConstraintError(f"noise variance must be >= 0, got {sigma2}")
        self.m = m
        self.sigma2 = sigma2
        self.params = params
        self.opt_config = opt_config or OptConfig()
        self.init_exact_limit = init_exact_limit
        self.d_powers = DistancePowerSet(())
        self.a = None if coeffs is None else _validated_coeffs(coeffs, m)
        self.X: Optional[np.ndarray] = None
        self.y = np.zeros(0)
        self._batches = 0
        self._opt_calls = 0

    @property
    def n(self) -> int:
        return 0 if self.X is None else self.X.shape[0]

    @property
    def rank(self) -> int:
        factors = self.d_powers.factors
        return max((f.r for f in factors), default=0)

    def absorb_targets(self, y_b) -> None:
        self.y = np.concatenate([self.y, np.asarray(y_b, dtype=float).ravel()])


def _validated_coeffs(coeffs, m: int) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (m,):
        raise DimensionError(f"expected {m} coefficients, got shape {coeffs.shape}")
    if (coeffs < 0).any():
        raise ConstraintError(f"coefficients must be non-negative, got {coeffs}")
    return coeffs


def default_initial_coeffs(X, m: int) -> np.ndarray:
    """Scale-aware starting point: [1, 1/med, 1/med^2, ...].

    ``med`` is the median off-diagonal pairwise distance of the given points,
    so each term of the kernel starts with comparable magnitude.
    """
    D = pairwise_distances(X)
    n = D.shape[0]
    if n < 2:
        return np.ones(m)
    med = float(np.median(D[np.triu_indices(n, 1)]))
    if med <= 0:
        return np.ones(m)
    return np.array([1.0] + [med**-i for i in range(1, m)])


# ---------------------------------------------------------------------- #
# factor maintenance


def update_distance_factors(state: HyperState, X_b) -> HyperState:
    """Grow every distance-power factor with a batch of new points.

    The first batch (and any batch while the data is narrower than the
    sketch) factors the small dense powers directly; afterwards each power is
    grown through the bordered update with cross block ``D_x^i`` and trailing
    block ``D_b^i``.
    """
    X_b = np.asarray(X_b, dtype=float)
    if X_b.ndim == 1:
        X_b = X_b[:, None]
    if X_b.shape[0] == 0:
        return state
    X_old = state.X
    state.X = X_b.copy() if X_old is None else np.vstack([X_old, X_b])
    state._batches += 1
    n = state.n
    width = state.params.width
    if not state.d_powers.factors or width > n:
        state.d_powers = DistancePowerSet(
            tuple(_fresh_power_factors(state.X, state))
        )
        return state
    cross = cross_distances(X_old, X_b)
    block = pairwise_distances(X_b)
    factors = []
    cross_p = None
    block_p = None
    for i, factor in enumerate(state.d_powers.factors, start=1):
        cross_p = cross if cross_p is None else cross_p * cross
        block_p = block if block_p is None else block_p * block
        factors.append(
            seq_update(factor, cross_p, block_p, state.params.child(state._batches, i))
        )
    state.d_powers = DistancePowerSet(tuple(factors))
    return state


def _fresh_power_factors(X, state: HyperState):
    """Factor D^1 .. D^(m-1) of the given points from scratch."""
    D = pairwise_distances(X)
    n = D.shape[0]
    width = state.params.width
    rank = min(state.params.k if state.params.truncate else width, n)
    factors = []
    power = None
    for i in range(1, state.m):
        power = D if power is None else power * D
        if n <= state.init_exact_limit or width >= n:
            factors.append(dense_factor(power, rank=rank))
        else:
            dense = power
            factors.append(
                approx_eig(
                    lambda blk, dense=dense: dense @ blk,
                    n,
                    state.params.child(state._batches, i),
                )
            )
    return factors


# ---------------------------------------------------------------------- #
# chained regularized inverse


def _clamped_pairs(factors):
    pairs = []
    for f in factors:
        if f.r == 0:
            pairs.append((f.U, f.S))
            continue
        keep = np.abs(f.S) >= TAU_CLAMP * np.abs(f.S).max()
        pairs.append((f.U[:, keep], f.S[keep]))
    return pairs


class _ChainedInverse:
    """Inverse of ``(a0 + s2) I + sum a_i U_i S_i U_i^T`` via nested Woodbury.

    Terms are folded in ascending order; each contributes one small inner
    factorization, so building the chain costs O(n r^2) per term and applying
    it O(n r) per term. ``pairs`` are (U, S) arrays; U need not be
    orthonormal (row-restricted factors are valid inputs).
    """

    def __init__(self, pairs, coeffs, sigma2: float):
        coeffs = np.asarray(coeffs, dtype=float)
        base = coeffs[0] + sigma2
        if base <= 0:
            raise ConstraintError(
                f"a0 + noise variance must be positive, got {base}"
            )
        self.base = base
        self.layers = []
        for (U, S), a_i in zip(pairs, coeffs[1:]):
            if S.size == 0:
                continue
            # skip terms that cannot move the base diagonal at double precision
            if a_i * np.abs(S).max() < base * 1e-15:
                continue
            G = self.apply(U)
            W = np.diag(1.0 / (a_i * S)) + U.T @ G
            cond = float(np.linalg.cond(W))
            if not np.isfinite(cond) or cond > COND_LIMIT:
                raise SingularSystemError(
                    f"inner Woodbury system is near-singular (cond {cond:.3e})",
                    cond=cond,
                )
            lu = scipy.linalg.lu_factor(W, check_finite=False)
            self.layers.append((U, G, lu))

    def apply(self, v: np.ndarray) -> np.ndarray:
        out = np.asarray(v, dtype=float) / self.base
        for U, G, lu in self.layers:
            inner = scipy.linalg.lu_solve(lu, U.T @ out, check_finite=False)
            out = out - G @ inner
        return out


def chained_inverse_apply(state: HyperState, v, coeffs=None) -> np.ndarray:
    """Apply ``(K_a + s2 I)^-1`` using the stored distance-power factors.

    ``coeffs`` defaults to the state's current vector; passing a candidate
    evaluates it without touching the factors.
    """
    coeffs = state.a if coeffs is None else _validated_coeffs(coeffs, state.m)
    if coeffs is None:
        raise ConstraintError("state has no coefficient vector yet")
    chain = _ChainedInverse(_clamped_pairs(state.d_powers.factors), coeffs, state.sigma2)
    return chain.apply(np.asarray(v, dtype=float))


# ---------------------------------------------------------------------- #
# objective and optimizer


def training_objective(
    state: HyperState, coeffs=None, y=None, holdout_fraction: float = 0.0
) -> float:
    """Prediction RMSE of the absorbed training data under ``coeffs``.

    In-sample by default: predictions are ``K_off (K_a + s2 I)^-1 y`` with
    the nugget excluded from cross-covariances, which collapses to
    ``y - (a0 + s2) alpha``. With a holdout fraction, the trailing slice of
    the data is predicted from the leading slice through row-restricted
    factors instead.
    """
    coeffs = state.a if coeffs is None else _validated_coeffs(coeffs, state.m)
    if coeffs is None:
        raise ConstraintError("state has no coefficient vector yet")
    y = state.y if y is None else np.asarray(y, dtype=float).ravel()
    if y.size == 0:
        raise SeqGpError("no training data absorbed yet")
    pairs = _clamped_pairs(state.d_powers.factors)
    base = coeffs[0] + state.sigma2
    if holdout_fraction <= 0.0:
        chain = _ChainedInverse(pairs, coeffs, state.sigma2)
        alpha = chain.apply(y)
        return float(np.sqrt(np.mean((base * alpha) ** 2)))
    n = y.size
    n_val = max(1, int(round(holdout_fraction * n)))
    if n_val >= n:
        raise ConstraintError("holdout fraction leaves no training data")
    split = n - n_val
    train_pairs = [(U[:split], S) for U, S in pairs]
    chain = _ChainedInverse(train_pairs, coeffs, state.sigma2)
    alpha = chain.apply(y[:split])
    yhat = np.zeros(n_val)
    for (U, S), a_i in zip(pairs, coeffs[1:]):
        if not a_i or S.size == 0:
            continue
        yhat += a_i * (U[split:] @ (S * (U[:split].T @ alpha)))
    return float(np.sqrt(np.mean((yhat - y[split:]) ** 2)))


def _append_trace(path, call_index: int, m: int, evals) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(
                ["call", "eval"] + [f"a{i}" for i in range(m)] + ["objective"]
            )
        for j, (a, f) in enumerate(evals):
            writer.writerow([call_index, j] + [repr(float(x)) for x in a] + [repr(f)])


def _run_neldermead(objective, a_init, config: OptConfig, call_index: int) -> OptResult:
    """Nelder-Mead on log-coefficients; returns the best evaluated point."""
    a_init = np.asarray(a_init, dtype=float)
    theta0 = np.log(np.maximum(a_init, COEFF_FLOOR))
    evals = []

    def fun(theta):
        a = np.exp(theta)
        try:
            f = float(objective(a))
        except SingularSystemError:
            f = np.inf
        if np.isnan(f):
            f = np.inf
        evals.append((a, f))
        return f

    f0 = fun(theta0)
    scale = abs(f0) if np.isfinite(f0) else 1.0
    simplex = np.vstack(
        [theta0]
        + [theta0 + config.simplex_step * np.eye(theta0.size)[i] for i in range(theta0.size)]
    )
    scipy.optimize.minimize(
        fun,
        theta0,
        method="Nelder-Mead",
        options={
            "maxiter": config.max_iters,
            "fatol": config.objective_tolerance * max(scale, 1e-12),
            "xatol": config.simplex_step * 1e-2,
            "initial_simplex": simplex,
            "adaptive": False,
        },
    )
    finite = [(a, f) for a, f in evals if np.isfinite(f)]
    if config.trace_path:
        _append_trace(config.trace_path, call_index, a_init.size, evals)
    if not finite:
        return OptResult(
            coeffs=a_init,
            objective=f0,
            initial_objective=f0,
            n_evals=len(evals),
            improved=False,
            collapsed=True,
        )
    best_a, best_f = min(finite, key=lambda item: item[1])
    if best_f > f0:
        best_a, best_f = a_init, f0
    return OptResult(
        coeffs=np.asarray(best_a, dtype=float),
        objective=best_f,
        initial_objective=f0,
        n_evals=len(evals),
        improved=best_f < f0,
        collapsed=False,
    )


def optimize_hypers(state: HyperState, y=None, objective=None) -> OptResult:
    """Minimize the training objective over feasible coefficient vectors.

    Every evaluated vector is strictly positive (log parameterization), so
    the non-negativity constraint holds exactly at every iterate, not just
    at convergence. The state's coefficients are updated to the best point.
    """
    if state.a is None:
        raise ConstraintError("state has no coefficient vector to start from")
    if objective is None:
        cfg = state.opt_config

        def objective(a):
            return training_objective(
                state, coeffs=a, y=y, holdout_fraction=cfg.holdout_fraction
            )

    result = _run_neldermead(objective, state.a, state.opt_config, state._opt_calls)
    state._opt_calls += 1
    state.a = np.asarray(result.coeffs, dtype=float)
    return result


# ---------------------------------------------------------------------- #
# streaming drivers


class _FactoredPolyModel:
    """Distance-power factors maintained sequentially (or refactored per batch)."""

    def __init__(self, m, sigma2, params, opt_config, batch_refactor, init_exact_limit):
        self.state = HyperState(
            m, sigma2, params, opt_config, init_exact_limit=init_exact_limit
        )
        self.batch_refactor = batch_refactor
        self.clamped_variances = 0

    @property
    def n(self):
        return self.state.n

    @property
    def rank(self):
        return self.state.rank

    @property
    def coeffs(self):
        return self.state.a

    @coeffs.setter
    def coeffs(self, value):
        self.state.a = _validated_coeffs(value, self.state.m)

    def absorb(self, X_b, y_b):
        state = self.state
        if self.batch_refactor and state.n:
            X_b = np.asarray(X_b, dtype=float)
            if X_b.ndim == 1:
                X_b = X_b[:, None]
            state.X = np.vstack([state.X, X_b])
            state._batches += 1
            state.d_powers = DistancePowerSet(
                tuple(_fresh_power_factors(state.X, state))
            )
        else:
            update_distance_factors(state, X_b)
        state.absorb_targets(y_b)

    def predict(self, X_new) -> Prediction:
        state = self.state
        chain = _ChainedInverse(
            _clamped_pairs(state.d_powers.factors), state.a, state.sigma2
        )
        Kc = poly_cross_kernel(state.X, X_new, state.a)
        alpha = chain.apply(state.y)
        mean = Kc.T @ alpha
        W = chain.apply(Kc)
        variance = state.a[0] - np.einsum("ij,ij->j", Kc, W)
        negative = variance < 0
        if negative.any():
            self.clamped_variances += int(negative.sum())
            variance = np.where(negative, 0.0, variance)
        return Prediction(mean=mean, variance=variance)

    def optimize(self) -> OptResult:
        return optimize_hypers(self.state)

    def to_kernel_state(self, params, init_exact_limit) -> GpState:
        spec = KernelSpec(PolyDistance(tuple(self.state.a)), self.state.sigma2)
        gps = GpState(spec, Engine.SRMF, params, init_exact_limit)
        gps.absorb_batch(self.state.X, self.state.y)
        return gps


class _DensePolyModel:
    """Exact baseline: dense distance powers rebuilt every batch."""

    def __init__(self, m, sigma2, opt_config):
        self.m = m
        self.sigma2 = sigma2
        self.opt_config = opt_config
        self.X = None
        self.y = np.zeros(0)
        self.powers = []
        self.coeffs = None
        self.clamped_variances = 0
        self._opt_calls = 0

    @property
    def n(self):
        return 0 if self.X is None else self.X.shape[0]

    @property
    def rank(self):
        return self.n

    def absorb(self, X_b, y_b):
        X_b = np.asarray(X_b, dtype=float)
        if X_b.ndim == 1:
            X_b = X_b[:, None]
        self.X = X_b.copy() if self.X is None else np.vstack([self.X, X_b])
        self.y = np.concatenate([self.y, np.asarray(y_b, dtype=float).ravel()])
        D = pairwise_distances(self.X)
        self.powers = []
        power = None
        for _ in range(1, self.m):
            power = D if power is None else power * D
            self.powers.append(power)

    def _solver(self, coeffs):
        gram = coeffs[0] * np.eye(self.n)
        for a_i, power in zip(coeffs[1:], self.powers):
            if a_i:
                gram += a_i * power
        gram[np.diag_indices_from(gram)] += self.sigma2
        try:
            cho = scipy.linalg.cho_factor(gram, lower=True, check_finite=False)
            return lambda v: scipy.linalg.cho_solve(cho, v, check_finite=False)
        except scipy.linalg.LinAlgError:
            lu = scipy.linalg.lu_factor(gram, check_finite=False)
            return lambda v: scipy.linalg.lu_solve(lu, v, check_finite=False)

    def objective(self, coeffs) -> float:
        solve = self._solver(coeffs)
        alpha = solve(self.y)
        base = coeffs[0] + self.sigma2
        return float(np.sqrt(np.mean((base * alpha) ** 2)))

    def predict(self, X_new) -> Prediction:
        solve = self._solver(self.coeffs)
        Kc = poly_cross_kernel(self.X, X_new, self.coeffs)
        mean = Kc.T @ solve(self.y)
        W = solve(Kc)
        variance = self.coeffs[0] - np.einsum("ij,ij->j", Kc, W)
        negative = variance < 0
        if negative.any():
            self.clamped_variances += int(negative.sum())
            variance = np.where(negative, 0.0, variance)
        return Prediction(mean=mean, variance=variance)

    def optimize(self) -> OptResult:
        result = _run_neldermead(
            self.objective, self.coeffs, self.opt_config, self._opt_calls
        )
        self._opt_calls += 1
        self.coeffs = np.asarray(result.coeffs, dtype=float)
        return result


def run_mode(
    stream: Iterable,
    *,
    sigma2: float,
    params: SketchParams,
    mode: OptMode,
    engine: Engine = Engine.SRMF,
    m: int = 3,
    opt_config: Optional[OptConfig] = None,
    labeling: Labeling = Labeling.SELF_LABELS,
    initial_coeffs=None,
    init_exact_limit: int = DEFAULT_INIT_EXACT_LIMIT,
) -> StreamMetrics:
    """Stream the polynomial-distance kernel under an optimization mode.

    Per batch: predict the incoming points, absorb them (with predicted
    labels when self-labeling), then optimize the coefficients if the mode
    schedules it. The starting coefficients default to the scale-aware
    vector derived from the first batch. Batch wall-time includes the
    optimization step.
    """
    mode = mode if isinstance(mode, OptMode) else OptMode.parse(mode)
    engine = Engine(engine)
    labeling = Labeling(labeling)
    opt_config = opt_config or OptConfig()
    stream = iter(stream)

    if mode.kind == "none":
        first = next(stream, None)
        if first is None:
            return StreamMetrics()
        coeffs = (
            default_initial_coeffs(first[0], m)
            if initial_coeffs is None
            else _validated_coeffs(initial_coeffs, m)
        )
        spec = KernelSpec(PolyDistance(tuple(coeffs)), sigma2)
        return _gp_stream_run(
            itertools.chain([first], stream),
            spec,
            engine,
            params,
            labeling,
            init_exact_limit,
        )

    if engine is Engine.NRMF:
        model = _DensePolyModel(m, sigma2, opt_config)
    else:
        model = _FactoredPolyModel(
            m,
            sigma2,
            params,
            opt_config,
            batch_refactor=(engine is Engine.BRMF),
            init_exact_limit=init_exact_limit,
        )

    metrics = StreamMetrics()
    kernel_state: Optional[GpState] = None
    self_labeling = labeling is Labeling.SELF_LABELS
    for index, (X_b, y_b) in enumerate(stream, start=1):
        y_b = np.asarray(y_b, dtype=float).ravel()
        t0 = time.perf_counter()
        if kernel_state is not None:
            pred = kernel_state.predict(X_b)
            kernel_state.absorb_batch(X_b, pred.mean if self_labeling else y_b)
            n_now, rank = kernel_state.n, kernel_state.rank
        else:
            if model.n == 0:
                pred = None
                if model.coeffs is None:
                    model.coeffs = (
                        default_initial_coeffs(X_b, m)
                        if initial_coeffs is None
                        else _validated_coeffs(initial_coeffs, m)
                    )
                model.absorb(X_b, y_b)
            else:
                pred = model.predict(X_b)
                model.absorb(X_b, pred.mean if self_labeling else y_b)
            if mode.optimizes_at(index):
                model.optimize()
            if mode.kind == "hybrid" and index >= mode.n_steps:
                if isinstance(model, _FactoredPolyModel):
                    kernel_state = model.to_kernel_state(params, init_exact_limit)
                else:
                    spec = KernelSpec(PolyDistance(tuple(model.coeffs)), sigma2)
                    kernel_state = GpState(spec, Engine.SRMF, params, init_exact_limit)
                    kernel_state.absorb_batch(model.X, model.y)
            n_now, rank = model.n, model.rank
        elapsed = time.perf_counter() - t0
        rmse = (
            None
            if pred is None
            else float(np.sqrt(np.mean((pred.mean - y_b) ** 2)))
        )
        metrics.append(
            BatchRecord(batch=index, n=n_now, rmse=rmse, time_s=elapsed, rank=rank)
        )
    return metrics
