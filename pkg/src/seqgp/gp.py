"""Gaussian-process regression with three interchangeable inverse engines.

* NRMF: exact baseline. The dense regularized Gram matrix and its
  factorization are rebuilt from scratch on every batch.
* BRMF: batch low-rank. The dense Gram matrix is rebuilt each batch and
  refactored with a fresh randomized sketch.
* SRMF: sequential low-rank. The factor of the previous Gram matrix is grown
  in place through the bordered update, so a batch costs O(n k^2 + n k b).

For the factored engines the regularized inverse is applied through the
low-rank identity ``(K + s2 I)^-1 v = (v - U (S/(S+s2)) U^T v) / s2``;
eigenvalues tiny relative to the largest are dropped from the correction so
indefinite factors cannot blow it up.
"""

from __future__ import annotations

import io
import json
import struct
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import scipy.linalg

from .errors import ConstraintError, DimensionError, SeqGpError
from .kernels import KernelSpec, cross_kernel, kernel_diag, kernel_matrix
from .metrics import BatchRecord, StreamMetrics
from .rla import SketchParams, SymEigFactor, approx_eig, dense_factor, seq_update

# Eigenvalues below this fraction of the largest magnitude are dropped from
# the low-rank inverse correction.
TAU_CLAMP = 1e-10

# Streams whose first factorization is at most this large are initialized
# with an exact (dense) eigendecomposition; larger ones with a sketch.
DEFAULT_INIT_EXACT_LIMIT = 2000

CHECKPOINT_MAGIC = b"SEQGPCKP"
CHECKPOINT_VERSION = 1


class Engine(str, Enum):
    NRMF = "nrmf"  # exact dense baseline
    BRMF = "brmf"  # refactor from scratch each batch
    SRMF = "srmf"  # sequential factor update


class Labeling(str, Enum):
    TRUE_LABELS = "true_labels"
    SELF_LABELS = "self_labels"


@dataclass(frozen=True)
class Prediction:
    mean: np.ndarray
    variance: np.ndarray


class GpState:
    """Training data plus the current representation of the inverse.

    Mutated only by `absorb_batch`; `predict` and `inverse_apply` are
    read-only and safe to call concurrently between updates.
    """

    def __init__(
        self,
        spec: KernelSpec,
        engine: Engine = Engine.SRMF,
        params: Optional[SketchParams] = None,
        init_exact_limit: int = DEFAULT_INIT_EXACT_LIMIT,
    ):
        self.engine = Engine(engine)
        if self.engine is not Engine.NRMF and params is None:
            raise ConstraintError(f"engine {self.engine.value} requires sketch parameters")
        self.spec = spec
        self.params = params
        self.init_exact_limit = init_exact_limit
        self.X: Optional[np.ndarray] = None
        self.y = np.zeros(0)
        self._factor: Optional[SymEigFactor] = None
        self._solve = None  # NRMF: solver closure for K + s2 I
        self._batches = 0
        self.clamped_variances = 0  # diagnostic: negative variances clipped

    @property
    def n(self) -> int:
        return 0 if self.X is None else self.X.shape[0]

    @property
    def rank(self) -> int:
        """Retained rank of the inverse representation."""
        if self.engine is Engine.NRMF:
            return self.n
        return self._factor.r if self._factor is not None else 0

    @property
    def factor(self) -> Optional[SymEigFactor]:
        return self._factor

    # ------------------------------------------------------------------ #
    # updates

    def absorb_batch(self, X_b, y_b) -> "GpState":
        """Fold a batch of labelled points into the state."""
        X_b = np.asarray(X_b, dtype=float)
        if X_b.ndim == 1:
            X_b = X_b[:, None]
        y_b = np.asarray(y_b, dtype=float).ravel()
        if X_b.shape[0] != y_b.size:
            raise DimensionError(
                f"batch has {X_b.shape[0]} inputs but {y_b.size} outputs"
            )
        if X_b.shape[0] == 0:
            return self
        if self.X is not None and X_b.shape[1] != self.X.shape[1]:
            raise DimensionError(
                f"batch dimension {X_b.shape[1]} != training dimension {self.X.shape[1]}"
            )
        X_old = self.X
        self.X = X_b.copy() if X_old is None else np.vstack([X_old, X_b])
        self.y = np.concatenate([self.y, y_b])
        self._batches += 1
        if self.engine is Engine.NRMF:
            self._refresh_dense_solve()
        elif self.engine is Engine.BRMF:
            self._refactor_from_scratch()
        else:
            self._update_sequential(X_old, X_b)
        return self

    def _refresh_dense_solve(self):
        s2 = self.spec.noise_variance
        if s2 <= 0:
            raise ConstraintError("positive noise variance required to form the inverse")
        gram = kernel_matrix(self.X, self.spec)
        gram[np.diag_indices_from(gram)] += s2
        try:
            cho = scipy.linalg.cho_factor(gram, lower=True, check_finite=False)
            self._solve = lambda v: scipy.linalg.cho_solve(cho, v, check_finite=False)
        except scipy.linalg.LinAlgError:
            # indefinite regularized Gram (possible for the distance kernel)
            lu = scipy.linalg.lu_factor(gram, check_finite=False)
            self._solve = lambda v: scipy.linalg.lu_solve(lu, v, check_finite=False)

    def _refactor_from_scratch(self):
        gram = kernel_matrix(self.X, self.spec)
        n = self.n
        if self.params.width >= n or n <= 0:
            self._factor = dense_factor(gram)
            return
        self._factor = approx_eig(
            lambda blk: gram @ blk, n, self.params.child(self._batches)
        )

    def _update_sequential(self, X_old, X_b):
        n = self.n
        if self._factor is None or self.params.width > n:
            # first batch, or the sketch is still at least as wide as the
            # data: factor the small dense Gram matrix directly
            self._factor = self._initial_factor()
            return
        B = cross_kernel(X_old, X_b, self.spec)
        C = kernel_matrix(X_b, self.spec)
        self._factor = seq_update(
            self._factor, B, C, self.params.child(self._batches)
        )

    def _initial_factor(self) -> SymEigFactor:
        gram = kernel_matrix(self.X, self.spec)
        n = self.n
        width = self.params.width
        rank = min(self.params.k if self.params.truncate else width, n)
        if n <= self.init_exact_limit or width >= n:
            return dense_factor(gram, rank=rank)
        return approx_eig(lambda blk: gram @ blk, n, self.params.child(self._batches))

    # ------------------------------------------------------------------ #
    # queries

    def inverse_apply(self, v) -> np.ndarray:
        """Apply ``(K + s2 I)^-1`` to a vector or block."""
        s2 = self.spec.noise_variance
        if s2 <= 0:
            raise ConstraintError("positive noise variance required to form the inverse")
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.n:
            raise DimensionError(
                f"operand has leading dimension {v.shape[0]}, state holds {self.n} points"
            )
        if self.engine is Engine.NRMF:
            return self._solve(v)
        factor = self._factor
        if factor is None or factor.r == 0:
            return v / s2
        S, U = factor.S, factor.U
        keep = np.abs(S) >= TAU_CLAMP * np.abs(S).max()
        if not keep.all():
            S, U = S[keep], U[:, keep]
        if S.size == 0:
            return v / s2
        gain = S / (S + s2)
        proj = U.T @ v
        corr = U @ (gain * proj if v.ndim == 1 else gain[:, None] * proj)
        return (v - corr) / s2

    def predict(self, X_new) -> Prediction:
        """Posterior mean and (clamped) variance at the given points."""
        if self.n == 0:
            raise SeqGpError("no training data absorbed yet")
        X_new = np.asarray(X_new, dtype=float)
        if X_new.ndim == 1:
            X_new = X_new[:, None]
        if X_new.shape[1] != self.X.shape[1]:
            raise DimensionError(
                f"test dimension {X_new.shape[1]} != training dimension {self.X.shape[1]}"
            )
        Kc = cross_kernel(self.X, X_new, self.spec)
        alpha = self.inverse_apply(self.y)
        mean = Kc.T @ alpha
        W = self.inverse_apply(Kc)
        variance = kernel_diag(X_new, self.spec) - np.einsum("ij,ij->j", Kc, W)
        negative = variance < 0
        if negative.any():
            self.clamped_variances += int(negative.sum())
            variance = np.where(negative, 0.0, variance)
        return Prediction(mean=mean, variance=variance)


def stream_run(
    stream: Iterable,
    spec: KernelSpec,
    engine: Engine,
    params: Optional[SketchParams] = None,
    labeling: Labeling = Labeling.TRUE_LABELS,
    init_exact_limit: int = DEFAULT_INIT_EXACT_LIMIT,
) -> StreamMetrics:
    """Predict-then-absorb over a stream of (X_b, y_b) batches.

    The first batch is absorbed with its true labels (nothing to predict
    from yet). Under self-labeling, later batches are absorbed with the
    predicted means while the true labels are only used for scoring. Batch
    wall-time covers predict + absorb, not I/O.
    """
    labeling = Labeling(labeling)
    state = GpState(spec, engine, params, init_exact_limit)
    metrics = StreamMetrics()
    for index, (X_b, y_b) in enumerate(stream, start=1):
        y_b = np.asarray(y_b, dtype=float).ravel()
        t0 = time.perf_counter()
        if state.n == 0:
            state.absorb_batch(X_b, y_b)
            rmse = None
        else:
            pred = state.predict(X_b)
            labels = pred.mean if labeling is Labeling.SELF_LABELS else y_b
            state.absorb_batch(X_b, labels)
            rmse = float(np.sqrt(np.mean((pred.mean - y_b) ** 2)))
        elapsed = time.perf_counter() - t0
        metrics.append(
            BatchRecord(
                batch=index, n=state.n, rmse=rmse, time_s=elapsed, rank=state.rank
            )
        )
    return metrics


# ---------------------------------------------------------------------- #
# checkpointing


def _spec_to_dict(spec: KernelSpec) -> dict:
    fam = spec.family
    if hasattr(fam, "lengthscale"):
        family = {
            "kind": "se",
            "lengthscale": fam.lengthscale,
            "signal_variance": fam.signal_variance,
        }
    else:
        family = {"kind": "poly", "coeffs": list(fam.coeffs)}
    return {"family": family, "noise_variance": spec.noise_variance}


def _spec_from_dict(data: dict) -> KernelSpec:
    from .kernels import PolyDistance, SquaredExponential

    fam = data["family"]
    if fam["kind"] == "se":
        family = SquaredExponential(fam["lengthscale"], fam["signal_variance"])
    else:
        family = PolyDistance(tuple(fam["coeffs"]))
    return KernelSpec(family, data["noise_variance"])


def _write_array(fh, arr: np.ndarray) -> None:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    payload = buf.getvalue()
    fh.write(struct.pack("<Q", len(payload)))
    fh.write(payload)


def _read_array(fh) -> np.ndarray:
    (size,) = struct.unpack("<Q", fh.read(8))
    return np.load(io.BytesIO(fh.read(size)), allow_pickle=False)


def save_checkpoint(state: GpState, path) -> None:
    """Write a resumable snapshot (inputs, outputs, factor, spec, seed)."""
    header = {
        "engine": state.engine.value,
        "spec": _spec_to_dict(state.spec),
        "params": None
        if state.params is None
        else {
            "k": state.params.k,
            "p": state.params.p,
            "rng_seed": state.params.rng_seed,
            "truncate": state.params.truncate,
        },
        "init_exact_limit": state.init_exact_limit,
        "batches": state._batches,
        "clamped_variances": state.clamped_variances,
        "has_factor": state._factor is not None,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        _write_array(fh, state.X if state.X is not None else np.zeros((0, 0)))
        _write_array(fh, state.y)
        if state._factor is not None:
            _write_array(fh, state._factor.U)
            _write_array(fh, state._factor.S)


def load_checkpoint(path) -> GpState:
    """Rebuild a `GpState` from a snapshot; dense solves are recomputed."""
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise SeqGpError(f"{path} is not a seqgp checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise SeqGpError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(blob_len).decode())
        X = _read_array(fh)
        y = _read_array(fh)
        factor = None
        if header["has_factor"]:
            U = _read_array(fh)
            S = _read_array(fh)
            factor = SymEigFactor(U, S)
    params = header["params"]
    state = GpState(
        spec=_spec_from_dict(header["spec"]),
        engine=Engine(header["engine"]),
        params=None if params is None else SketchParams(**params),
        init_exact_limit=header["init_exact_limit"],
    )
    if X.size:
        state.X = X
        state.y = y
    state._batches = header["batches"]
    state.clamped_variances = header["clamped_variances"]
    state._factor = factor
    if state.engine is Engine.NRMF and state.n:
        state._refresh_dense_solve()
    elif state.engine is Engine.BRMF and state.n and factor is None:
        state._refactor_from_scratch()
    return state
