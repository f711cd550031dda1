"""Kernel functions and pairwise-distance machinery.

Two kernel families are supported: the squared-exponential kernel
``s * exp(-||x - z||^2 / (2 l^2))`` and a polynomial-distance kernel
``a0 I + sum_i a_i D^i`` built from elementwise powers of the pairwise
Euclidean distance matrix. The a0 term acts as a nugget: it contributes to
the Gram diagonal and to prior variance but not to cross-covariances between
distinct realizations.

Distance matrices are generally indefinite, so everything downstream treats
their factors as signed eigendecompositions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import ConstraintError, DimensionError
from .rla import SymEigFactor


@dataclass(frozen=True)
class SquaredExponential:
    """Squared-exponential family: ``s * exp(-r^2 / (2 l^2))``."""

    lengthscale: float
    signal_variance: float = 1.0

    def __post_init__(self):
        if not self.lengthscale > 0:
            raise ConstraintError(f"lengthscale must be > 0, got {self.lengthscale}")
        if not self.signal_variance > 0:
            raise ConstraintError(
                f"signal variance must be > 0, got {self.signal_variance}"
            )


@dataclass(frozen=True)
class PolyDistance:
    """Polynomial-distance family: ``a0 I + sum_{i>=1} a_i D^i``.

    ``coeffs`` holds m >= 2 non-negative coefficients; coefficient i weights
    the elementwise i-th power of the distance matrix, coefficient 0 the
    identity (nugget) term.
    """

    coeffs: tuple

    def __post_init__(self):
        coeffs = tuple(float(c) for c in self.coeffs)
        object.__setattr__(self, "coeffs", coeffs)
        if len(coeffs) < 2:
            raise ConstraintError("polynomial-distance kernel needs >= 2 coefficients")
        if any(c < 0 for c in coeffs):
            raise ConstraintError(f"coefficients must be non-negative, got {coeffs}")

    @property
    def m(self) -> int:
        return len(self.coeffs)


KernelFamily = Union[SquaredExponential, PolyDistance]


@dataclass(frozen=True)
class KernelSpec:
    """A kernel family plus the observation-noise variance."""

    family: KernelFamily
    noise_variance: float = 0.0

    def __post_init__(self):
        if self.noise_variance < 0:
            raise ConstraintError(
                f"noise variance must be >= 0, got {self.noise_variance}"
            )


def _check_finite(X: np.ndarray, name: str) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if not np.isfinite(X).all():
        raise ConstraintError(f"{name} contains non-finite values")
    return X


def _as_points(X, name: str = "X") -> np.ndarray:
    X = _check_finite(X, name)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise DimensionError(f"{name} must be an n x d array, got shape {X.shape}")
    return X


def _sq_cross(X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    # ||x||^2 + ||z||^2 - 2 x.z with negative round-off clamped before sqrt
    sq = (
        np.sum(X * X, axis=1)[:, None]
        + np.sum(Z * Z, axis=1)[None, :]
        - 2.0 * (X @ Z.T)
    )
    np.maximum(sq, 0.0, out=sq)
    return sq


def pairwise_distances(X) -> np.ndarray:
    """Pairwise Euclidean distance matrix, symmetric with a zero diagonal."""
    X = _as_points(X)
    D = np.sqrt(_sq_cross(X, X))
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return D


def cross_distances(X, Z) -> np.ndarray:
    """Euclidean distances between two point sets, shape (len(X), len(Z))."""
    X = _as_points(X)
    Z = _as_points(Z, "Z")
    if X.shape[1] != Z.shape[1]:
        raise DimensionError(
            f"point sets have dimensions {X.shape[1]} and {Z.shape[1]}"
        )
    return np.sqrt(_sq_cross(X, Z))


def hadamard_power(D, i: int) -> np.ndarray:
    """Elementwise i-th power of a matrix (i >= 1). Preserves symmetry."""
    if int(i) != i or i < 1:
        raise ConstraintError(f"power must be a positive integer, got {i}")
    D = np.asarray(D, dtype=float)
    return D ** int(i)


def se_kernel(X, Z, family: SquaredExponential) -> np.ndarray:
    """Squared-exponential kernel matrix between two point sets."""
    X = _as_points(X)
    Z = _as_points(Z, "Z")
    if X.shape[1] != Z.shape[1]:
        raise DimensionError(
            f"point sets have dimensions {X.shape[1]} and {Z.shape[1]}"
        )
    sq = _sq_cross(X, Z)
    return family.signal_variance * np.exp(-sq / (2.0 * family.lengthscale**2))


def poly_cross_kernel(X, Z, coeffs) -> np.ndarray:
    """Cross-covariances of the polynomial-distance kernel (nugget excluded)."""
    coeffs = np.asarray(coeffs, dtype=float)
    D = cross_distances(X, Z)
    K = np.zeros_like(D)
    power = None
    for i in range(1, coeffs.size):
        power = D if power is None else power * D
        if coeffs[i]:
            K += coeffs[i] * power
    return K


def poly_gram(X, coeffs) -> np.ndarray:
    """Dense training Gram matrix ``a0 I + sum a_i D^i``."""
    coeffs = np.asarray(coeffs, dtype=float)
    X = _as_points(X)
    D = pairwise_distances(X)
    K = coeffs[0] * np.eye(len(D))
    power = None
    for i in range(1, coeffs.size):
        power = D if power is None else power * D
        if coeffs[i]:
            K += coeffs[i] * power
    return K


def kernel_matrix(X, spec: KernelSpec) -> np.ndarray:
    """Noise-free training Gram matrix for either kernel family."""
    fam = spec.family
    if isinstance(fam, SquaredExponential):
        return se_kernel(X, X, fam)
    return poly_gram(X, fam.coeffs)


def cross_kernel(X, Z, spec: KernelSpec) -> np.ndarray:
    """Covariances between training points X and test points Z."""
    fam = spec.family
    if isinstance(fam, SquaredExponential):
        return se_kernel(X, Z, fam)
    return poly_cross_kernel(X, Z, fam.coeffs)


def kernel_diag(Z, spec: KernelSpec) -> np.ndarray:
    """Prior variances k(z, z) at the given points."""
    Z = _as_points(Z, "Z")
    fam = spec.family
    if isinstance(fam, SquaredExponential):
        return np.full(len(Z), fam.signal_variance)
    return np.full(len(Z), fam.coeffs[0])


@dataclass(frozen=True)
class DistancePowerSet:
    """Low-rank factors of D^1 ... D^(m-1) over the points absorbed so far."""

    factors: tuple

    def __post_init__(self):
        factors = tuple(self.factors)
        object.__setattr__(self, "factors", factors)
        dims = {f.n for f in factors}
        if len(dims) > 1:
            raise DimensionError(f"factors disagree on dimension: {sorted(dims)}")

    @property
    def m(self) -> int:
        return len(self.factors) + 1

    @property
    def n(self) -> int:
        return self.factors[0].n if self.factors else 0


class PolyKernelOperator:
    """Implicit operator for ``K_a = a0 I + sum a_i D^i``.

    Each distance power may be supplied dense or as a `SymEigFactor`; with
    factored terms the action costs O(n r m). The operator is linear in the
    coefficient vector.
    """

    def __init__(self, d_powers: Sequence, coeffs):
        coeffs = np.asarray(coeffs, dtype=float)
        if (coeffs < 0).any():
            raise ConstraintError(f"coefficients must be non-negative, got {coeffs}")
        if coeffs.size != len(d_powers) + 1:
            raise DimensionError(
                f"{coeffs.size} coefficients need {coeffs.size - 1} distance powers, "
                f"got {len(d_powers)}"
            )
        dims = set()
        terms = []
        for term in d_powers:
            if isinstance(term, SymEigFactor):
                dims.add(term.n)
                terms.append(term)
            else:
                term = np.asarray(term, dtype=float)
                if term.ndim != 2 or term.shape[0] != term.shape[1]:
                    raise DimensionError("dense distance powers must be square")
                dims.add(term.shape[0])
                terms.append(term)
        if len(dims) > 1:
            raise DimensionError(f"distance powers disagree on dimension: {sorted(dims)}")
        self.coeffs = coeffs
        self.terms = terms
        self.n = dims.pop() if dims else 0

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.n:
            raise DimensionError(
                f"operand has leading dimension {v.shape[0]}, operator is {self.n}"
            )
        out = self.coeffs[0] * v
        for a_i, term in zip(self.coeffs[1:], self.terms):
            if not a_i:
                continue
            if isinstance(term, SymEigFactor):
                out = out + a_i * term.apply(v)
            else:
                out = out + a_i * (term @ v)
        return out

    def dense(self) -> np.ndarray:
        """Materialize the operator. Diagnostic use on small instances."""
        out = self.coeffs[0] * np.eye(self.n)
        for a_i, term in zip(self.coeffs[1:], self.terms):
            if not a_i:
                continue
            out += a_i * (term.dense() if isinstance(term, SymEigFactor) else term)
        return out


def poly_distance_kernel(d_powers: Sequence, coeffs) -> PolyKernelOperator:
    """Implicit ``K_a`` operator from distance powers and coefficients."""
    return PolyKernelOperator(d_powers, coeffs)
