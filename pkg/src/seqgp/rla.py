"""Randomized low-rank eigendecomposition of symmetric matrices.

The central object is a truncated factorization ``A ~ U S U^T`` obtained by
probing the matrix with a block of Gaussian test vectors. For matrices that
grow by appending rows and columns (kernel matrices in a streaming setting),
`seq_update` refreshes the factorization using only the previous factor and
the new blocks, so each update touches the old data solely through the
factored form. At fixed sketch width the update costs O(n k^2) where a fresh
sketch of the dense matrix would cost O(n^2 k).

All randomness is driven by an explicit seed; identical seeds and inputs
reproduce results bit for bit on a given platform.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ConstraintError,
    DimensionError,
    NonSymmetricError,
    SketchWidthError,
)

# Budget for ||U^T U - I||_F relative to the retained rank.
ORTHO_TOL = 1e-10
# Relative asymmetry tolerated in projected small matrices before we conclude
# the caller's matrix action is not symmetric.
SYMMETRY_RTOL = 1e-8
# Relative asymmetry tolerated in the trailing block of a bordered operator.
BLOCK_SYMMETRY_RTOL = 1e-12

MatrixAction = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SketchParams:
    """Width and seeding of the randomized sketch.

    ``k`` is the target rank and ``p`` the oversampling; the matrix is probed
    with ``k + p`` Gaussian test vectors. With ``truncate`` set, factors are
    cut back to the ``k`` leading eigenpairs after each factorization instead
    of keeping all ``k + p``.
    """

    k: int
    p: int
    rng_seed: int = 0
    truncate: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ConstraintError(f"target rank k must be >= 1, got {self.k}")
        if self.p < 1:
            raise ConstraintError(f"oversampling p must be >= 1, got {self.p}")

    @property
    def width(self) -> int:
        return self.k + self.p

    def child(self, *key: int) -> "SketchParams":
        """Params with a reproducible seed derived from ``key``.

        Used by streaming callers to give every update its own independent
        draw while staying a pure function of the base seed.
        """
        ss = np.random.SeedSequence(self.rng_seed, spawn_key=tuple(key))
        derived = int(ss.generate_state(1, dtype=np.uint64)[0])
        return replace(self, rng_seed=derived)


@dataclass(frozen=True)
class SymEigFactor:
    """Truncated eigendecomposition ``U S U^T`` of a symmetric matrix.

    ``U`` is n x r with orthonormal columns; ``S`` holds the r retained
    eigenvalues sorted by descending magnitude. Eigenvalues may be negative:
    indefinite matrices (e.g. distance matrices) are first-class citizens.
    Instances are immutable and safe to share across threads.
    """

    U: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        U = np.asarray(self.U, dtype=float)
        S = np.asarray(self.S, dtype=float)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "S", S)
        if U.ndim != 2 or S.ndim != 1:
            raise DimensionError("U must be 2-d and S 1-d")
        if U.shape[1] != S.size:
            raise DimensionError(
                f"U has {U.shape[1]} columns but S has {S.size} entries"
            )
        if U.shape[1] > U.shape[0]:
            raise DimensionError("retained rank exceeds matrix dimension")
        r = S.size
        if r:
            defect = np.linalg.norm(U.T @ U - np.eye(r))
            if defect > ORTHO_TOL * r:
                raise ConstraintError(
                    f"columns of U are not orthonormal (defect {defect:.3e})"
                )

    @property
    def n(self) -> int:
        return self.U.shape[0]

    @property
    def r(self) -> int:
        return self.S.size

    def apply(self, block: np.ndarray) -> np.ndarray:
        """Compute ``U S U^T @ block`` without forming the n x n matrix."""
        block = np.asarray(block, dtype=float)
        if block.shape[0] != self.n:
            raise DimensionError(
                f"block has leading dimension {block.shape[0]}, expected {self.n}"
            )
        proj = self.U.T @ block
        if block.ndim == 1:
            return self.U @ (self.S * proj)
        return self.U @ (self.S[:, None] * proj)

    def dense(self) -> np.ndarray:
        """Materialize ``U S U^T``. Diagnostic use on small instances only."""
        return self.U @ (self.S[:, None] * self.U.T)

    def orthonormality_defect(self) -> float:
        if self.r == 0:
            return 0.0
        return float(np.linalg.norm(self.U.T @ self.U - np.eye(self.r)))

    def truncated(self, rank: int) -> "SymEigFactor":
        """Keep only the ``rank`` leading (largest-magnitude) eigenpairs."""
        if rank >= self.r:
            return self
        return SymEigFactor(self.U[:, :rank], self.S[:rank])


def empty_factor(n: int = 0) -> SymEigFactor:
    """Rank-zero factor standing in for an all-zero n x n matrix."""
    return SymEigFactor(np.zeros((n, 0)), np.zeros(0))


@dataclass(frozen=True)
class BorderedOperator:
    """Implicit symmetric matrix ``[[U S U^T, B], [B^T, C]]``.

    Represents an (n_prev + b)-dimensional matrix whose leading block is only
    available in factored form. Matrix-vector products route through the
    factor, so the n_prev x n_prev block is never materialized.
    """

    factor: SymEigFactor
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        B = np.asarray(self.B, dtype=float)
        C = np.asarray(self.C, dtype=float)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        if B.ndim != 2:
            raise DimensionError("cross block B must be 2-d")
        if B.shape[0] != self.factor.n:
            raise DimensionError(
                f"cross block has {B.shape[0]} rows, factor dimension is {self.factor.n}"
            )
        b = B.shape[1]
        if C.shape != (b, b):
            raise DimensionError(f"trailing block must be {b}x{b}, got {C.shape}")
        if b:
            asym = np.linalg.norm(C - C.T)
            if asym > BLOCK_SYMMETRY_RTOL * max(np.linalg.norm(C), 1.0):
                raise NonSymmetricError(
                    f"trailing block C is not symmetric (asymmetry {asym:.3e})"
                )

    @property
    def b(self) -> int:
        return self.B.shape[1]

    @property
    def n(self) -> int:
        return self.factor.n + self.b

    def apply(self, block: np.ndarray) -> np.ndarray:
        return bordered_apply(self, block)


def bordered_apply(op: BorderedOperator, block: np.ndarray) -> np.ndarray:
    """Product of a bordered operator with a conformally partitioned block.

    With ``block = [w1; w2]`` returns ``[U(S (U^T w1)) + B w2; B^T w1 + C w2]``
    at cost O((n r + n b) m) for an m-column block.
    """
    block = np.asarray(block, dtype=float)
    if block.shape[0] != op.n:
        raise DimensionError(
            f"block has leading dimension {block.shape[0]}, operator is {op.n}"
        )
    n_prev = op.factor.n
    w1 = block[:n_prev]
    w2 = block[n_prev:]
    top = op.factor.apply(w1) + op.B @ w2
    bottom = op.B.T @ w1 + op.C @ w2
    return np.concatenate([top, bottom], axis=0)


@dataclass(frozen=True)
class RangeResult:
    """Orthonormal basis produced by the range finder.

    ``rank_deficient`` flags probes whose image did not span the full sketch
    width; the missing directions are then an arbitrary orthonormal
    completion supplied by the QR factorization.
    """

    Q: np.ndarray
    rank_deficient: bool


def range_finder(apply: MatrixAction, n: int, params: SketchParams) -> RangeResult:
    """Orthonormal basis for the dominant range of an n x n matrix action.

    Draws an n x (k+p) Gaussian test block (seeded by ``params.rng_seed``),
    pushes it through ``apply`` and orthonormalizes the image by Householder
    QR. The span of the returned Q captures the action of the matrix up to a
    multiple of its (k+1)-th singular value, with high probability.

    A sketch wider than the matrix is capped at n probes (the sketch is then
    exact up to round-off).
    """
    if n < 1:
        raise SketchWidthError(f"matrix dimension must be >= 1, got {n}")
    w = min(params.width, n)
    rng = np.random.default_rng(params.rng_seed)
    omega = rng.standard_normal((n, w))
    y = np.asarray(apply(omega), dtype=float)
    if y.shape != (n, w):
        raise DimensionError(
            f"matrix action returned shape {y.shape}, expected {(n, w)}"
        )
    q, r = np.linalg.qr(y)
    diag = np.abs(np.diagonal(r))
    scale = float(diag.max(initial=0.0))
    deficient = scale == 0.0 or bool(
        (diag <= scale * n * np.finfo(float).eps).any()
    )
    return RangeResult(Q=q, rank_deficient=deficient)


def approx_eig(apply: MatrixAction, n: int, params: SketchParams) -> SymEigFactor:
    """Randomized eigendecomposition of a symmetric matrix action.

    Projects the matrix onto the sketched range, eigendecomposes the small
    projected matrix and lifts the eigenvectors back: ``U = Q V``. The
    reconstruction error is bounded by roughly twice the range-finder error,
    i.e. a modest multiple of the (k+1)-th singular value.

    Raises NonSymmetricError when the projected matrix is asymmetric beyond
    round-off, which indicates a non-symmetric ``apply``.
    """
    found = range_finder(apply, n, params)
    q = found.Q
    aq = np.asarray(apply(q), dtype=float)
    if aq.shape != q.shape:
        raise DimensionError(
            f"matrix action returned shape {aq.shape}, expected {q.shape}"
        )
    z = q.T @ aq
    asym = np.linalg.norm(z - z.T)
    if asym > SYMMETRY_RTOL * max(np.linalg.norm(z), np.finfo(float).tiny):
        raise NonSymmetricError(
            f"projected matrix asymmetric ({asym:.3e}); apply closure is not symmetric"
        )
    z = 0.5 * (z + z.T)  # scrub round-off before the dense eigensolve
    lam, v = np.linalg.eigh(z)
    order = np.argsort(-np.abs(lam), kind="stable")
    lam = lam[order]
    v = v[:, order]
    if params.truncate and lam.size > params.k:
        lam = lam[: params.k]
        v = v[:, : params.k]
    return SymEigFactor(U=q @ v, S=lam)


def seq_update(
    factor: SymEigFactor,
    B: np.ndarray,
    C: np.ndarray,
    params: SketchParams,
) -> SymEigFactor:
    """Refresh a factorization after the matrix grew by b rows/columns.

    ``B`` (n_prev x b) and ``C`` (b x b, symmetric) are the newly appended
    blocks. The old data enters only through ``factor``, so the sketch costs
    O(n (k+p)^2 + n (k+p) b) instead of rescanning the dense matrix.
    """
    op = BorderedOperator(factor=factor, B=B, C=C)
    if params.width > op.n:
        raise SketchWidthError(
            f"sketch width k+p={params.width} exceeds grown dimension {op.n}; "
            "factor this matrix exactly instead (it is smaller than the sketch)"
        )
    return approx_eig(op.apply, op.n, params)


def dense_factor(A: np.ndarray, rank: int | None = None) -> SymEigFactor:
    """Exact eigendecomposition of a dense symmetric matrix.

    Optionally truncated to the ``rank`` leading eigenpairs by magnitude.
    Used to initialize streams and as the reference in tests.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {A.shape}")
    A = 0.5 * (A + A.T)
    lam, v = np.linalg.eigh(A)
    order = np.argsort(-np.abs(lam), kind="stable")
    lam = lam[order]
    v = v[:, order]
    if rank is not None and rank < lam.size:
        lam = lam[:rank]
        v = v[:, :rank]
    return SymEigFactor(U=v, S=lam)


def save_factor(factor: SymEigFactor, path) -> None:
    """Dump a factor to a plain-text file (header with n and r, then S and U).

    Row-major, full double precision; `load_factor` round-trips exactly.
    """
    path = Path(path)
    with path.open("w") as fh:
        fh.write("symeig 1\n")
        fh.write(f"{factor.n} {factor.r}\n")
        fh.write(" ".join(f"{x:.17g}" for x in factor.S) + "\n")
        for row in factor.U:
            fh.write(" ".join(f"{x:.17g}" for x in row) + "\n")


def load_factor(path) -> SymEigFactor:
    path = Path(path)
    with path.open() as fh:
        magic = fh.readline().split()
        if magic[:1] != ["symeig"]:
            raise ConstraintError(f"{path} is not a factor dump")
        n, r = (int(tok) for tok in fh.readline().split())
        S = np.array([float(tok) for tok in fh.readline().split()])
        if r == 0:
            return empty_factor(n)
        U = np.loadtxt(fh, ndmin=2)
    U = U.reshape(n, r)
    if S.size != r:
        raise ConstraintError(f"{path}: header promises r={r}, found {S.size}")
    return SymEigFactor(U=U, S=S)


def cumulative_error_bound(
    sketch_width: int,
    target_rank: int,
    spectra: Sequence[np.ndarray],
) -> float:
    """Cumulative reconstruction-error bound for a sequence of updates.

    ``spectra[t]`` holds the singular values (descending) of the full matrix
    at step t. Each step contributes ``2 (1 + 9 sqrt((k+p) n_t)) s_{k+1}(K_t)``
    and the contributions add up across the stream.
    """
    total = 0.0
    for sv in spectra:
        sv = np.asarray(sv, dtype=float)
        n_t = sv.size
        tail = float(sv[target_rank]) if target_rank < n_t else 0.0
        total += 2.0 * (1.0 + 9.0 * np.sqrt(sketch_width * n_t)) * tail
    return total
