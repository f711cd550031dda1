"""Tests for the randomized factorization and sequential update machinery.

Expected values come from independent dense oracles computed in-test:
numpy eigensolves for spectra and spectral norms, and literal dense block
assembly for the bordered operator.
"""

import time

import numpy as np
import pytest

from seqgp.errors import (
    ConstraintError,
    DimensionError,
    NonSymmetricError,
    SketchWidthError,
)
from seqgp.rla import (
    BorderedOperator,
    SketchParams,
    SymEigFactor,
    approx_eig,
    bordered_apply,
    cumulative_error_bound,
    dense_factor,
    empty_factor,
    load_factor,
    range_finder,
    save_factor,
    seq_update,
)


def spectral_norm(A):
    return float(np.abs(np.linalg.eigvalsh(0.5 * (A + A.T))).max())


def singular_values(A):
    return np.sort(np.abs(np.linalg.eigvalsh(0.5 * (A + A.T))))[::-1]


def se_gram(x, lengthscale=1.0):
    diff = x[:, None] - x[None, :]
    return np.exp(-(diff**2) / (2.0 * lengthscale**2))


def random_factor(n, r, seed):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((n, r)))
    s = rng.uniform(0.5, 3.0, size=r)
    order = np.argsort(-s)
    return SymEigFactor(q[:, order], s[order])


class TestSketchParams:
    def test_validation(self):
        with pytest.raises(ConstraintError):
            SketchParams(k=0, p=1)
        with pytest.raises(ConstraintError):
            SketchParams(k=1, p=0)
        assert SketchParams(k=3, p=2).width == 5

    def test_child_seeds_are_reproducible_and_distinct(self):
        params = SketchParams(k=2, p=2, rng_seed=99)
        assert params.child(3).rng_seed == params.child(3).rng_seed
        assert params.child(3).rng_seed != params.child(4).rng_seed
        assert params.child(3, 1).rng_seed != params.child(3, 2).rng_seed


class TestRangeFinder:
    def test_identity_bound(self):
        # all singular values equal one: error of any rank-3 projector is 1
        found = range_finder(lambda w: w, 5, SketchParams(k=2, p=1, rng_seed=0))
        A = np.eye(5)
        err = spectral_norm(A - found.Q @ (found.Q.T @ A))
        assert err <= 1.0 + 9.0 * np.sqrt(3 * 5) * 1.0
        assert np.allclose(found.Q.T @ found.Q, np.eye(3), atol=1e-12)

    def test_tiny_tail_bound_across_seeds(self):
        A = np.diag([100.0, 10.0, 1e-8, 0.0])
        bound = (1.0 + 9.0 * np.sqrt(4 * 4)) * 1e-8
        for seed in range(100):
            found = range_finder(
                lambda w: A @ w, 4, SketchParams(k=2, p=2, rng_seed=seed)
            )
            err = spectral_norm(A - found.Q @ (found.Q.T @ A))
            assert err <= bound

    def test_narrow_sketch_bound_across_seeds(self):
        A = np.diag([100.0, 10.0, 1e-8, 0.0])
        bound = (1.0 + 9.0 * np.sqrt(3 * 4)) * 1e-8
        hits = 0
        for seed in range(100):
            found = range_finder(
                lambda w: A @ w, 4, SketchParams(k=2, p=1, rng_seed=seed)
            )
            err = spectral_norm(A - found.Q @ (found.Q.T @ A))
            hits += err <= bound
        assert hits >= 95

    def test_rank_one_exact(self):
        rng = np.random.default_rng(5)
        v = rng.standard_normal(8)
        A = np.outer(v, v)
        found = range_finder(lambda w: A @ w, 8, SketchParams(k=1, p=1, rng_seed=3))
        err = spectral_norm(A - found.Q @ (found.Q.T @ A))
        assert err <= 1e-10 * spectral_norm(A)

    def test_zero_matrix_flagged_and_padded(self):
        found = range_finder(
            lambda w: np.zeros_like(w), 6, SketchParams(k=2, p=1, rng_seed=0)
        )
        assert found.rank_deficient
        assert np.allclose(found.Q.T @ found.Q, np.eye(3), atol=1e-12)

    def test_full_rank_not_flagged(self):
        found = range_finder(lambda w: w, 6, SketchParams(k=2, p=1, rng_seed=0))
        assert not found.rank_deficient

    def test_determinism(self):
        A = np.diag(np.arange(1.0, 7.0))
        params = SketchParams(k=2, p=2, rng_seed=123)
        q1 = range_finder(lambda w: A @ w, 6, params).Q
        q2 = range_finder(lambda w: A @ w, 6, params).Q
        assert np.array_equal(q1, q2)

    def test_width_capped_at_dimension(self):
        found = range_finder(lambda w: w, 3, SketchParams(k=3, p=2, rng_seed=0))
        assert found.Q.shape == (3, 3)

    def test_bad_apply_shape(self):
        with pytest.raises(DimensionError):
            range_finder(lambda w: w[:-1], 5, SketchParams(k=2, p=1))


class TestApproxEig:
    def test_full_rank_capture_is_exact(self):
        A = np.diag([3.0, 2.0, 1.0])
        factor = approx_eig(lambda w: A @ w, 3, SketchParams(k=3, p=1, rng_seed=0))
        assert np.allclose(np.sort(factor.S), [1.0, 2.0, 3.0], atol=1e-10)
        assert spectral_norm(A - factor.dense()) <= 1e-10
        # each column of U is a signed coordinate axis
        assert np.allclose(np.abs(factor.U).max(axis=0), 1.0, atol=1e-10)

    def test_kernel_matrix_bound_with_dense_oracle(self):
        x = np.linspace(0.0, 10.0, 50)
        A = se_gram(x)
        sv = singular_values(A)
        factor = approx_eig(lambda w: A @ w, 50, SketchParams(k=10, p=5, rng_seed=7))
        bound = 2.0 * (1.0 + 9.0 * np.sqrt(15 * 50)) * sv[10]
        assert spectral_norm(A - factor.dense()) <= bound

    def test_indefinite_matrix(self):
        A = np.diag([5.0, -2.0, 0.1])
        factor = approx_eig(lambda w: A @ w, 3, SketchParams(k=2, p=1, rng_seed=1))
        assert np.allclose(sorted(factor.S), [-2.0, 0.1, 5.0], atol=1e-10)
        # sorted by descending magnitude, signs preserved
        assert np.allclose(factor.S, [5.0, -2.0, 0.1], atol=1e-10)

    def test_non_symmetric_apply_raises(self):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((6, 6))
        with pytest.raises(NonSymmetricError):
            approx_eig(lambda w: A @ w, 6, SketchParams(k=2, p=2, rng_seed=0))

    def test_truncation_flag(self):
        A = np.diag(np.arange(1.0, 9.0))
        factor = approx_eig(
            lambda w: A @ w, 8, SketchParams(k=3, p=2, rng_seed=0, truncate=True)
        )
        assert factor.r == 3

    def test_orthonormality(self):
        rng = np.random.default_rng(3)
        X = rng.standard_normal((30, 4))
        A = X @ X.T
        factor = approx_eig(lambda w: A @ w, 30, SketchParams(k=6, p=3, rng_seed=2))
        assert factor.orthonormality_defect() <= 1e-10 * factor.r


class TestBorderedApply:
    def test_matches_dense_assembly(self):
        rng = np.random.default_rng(11)
        M = rng.standard_normal((4, 4))
        M = 0.5 * (M + M.T)
        B = rng.standard_normal((4, 2))
        C = rng.standard_normal((2, 2))
        C = 0.5 * (C + C.T)
        op = BorderedOperator(dense_factor(M), B, C)
        dense = np.block([[M, B], [B.T, C]])
        assert np.allclose(bordered_apply(op, np.eye(6)), dense, atol=1e-12)

    def test_zero_border(self):
        rng = np.random.default_rng(4)
        M = rng.standard_normal((5, 5))
        M = M + M.T
        op = BorderedOperator(dense_factor(M), np.zeros((5, 2)), np.zeros((2, 2)))
        w1 = rng.standard_normal((5, 3))
        block = np.vstack([w1, np.zeros((2, 3))])
        out = bordered_apply(op, block)
        assert np.allclose(out[:5], M @ w1, atol=1e-12)
        assert np.allclose(out[5:], 0.0)

    def test_rank_zero_factor(self):
        rng = np.random.default_rng(9)
        B = rng.standard_normal((3, 2))
        C = np.eye(2)
        op = BorderedOperator(empty_factor(3), B, C)
        block = rng.standard_normal((5, 2))
        out = bordered_apply(op, block)
        assert np.allclose(out[:3], B @ block[3:], atol=1e-14)
        assert np.allclose(out[3:], B.T @ block[:3] + C @ block[3:], atol=1e-14)

    def test_dimension_mismatch(self):
        op = BorderedOperator(empty_factor(3), np.zeros((3, 1)), np.zeros((1, 1)))
        with pytest.raises(DimensionError):
            bordered_apply(op, np.zeros((5, 2)))

    def test_asymmetric_trailing_block_rejected(self):
        with pytest.raises(NonSymmetricError):
            BorderedOperator(
                empty_factor(2), np.zeros((2, 2)), np.array([[0.0, 1.0], [0.0, 0.0]])
            )


class TestSeqUpdate:
    def test_growth_bound_with_dense_oracle(self):
        rng = np.random.default_rng(21)
        x = np.sort(rng.uniform(0, 8, size=40))
        K = se_gram(x, lengthscale=0.8)
        params = SketchParams(k=8, p=4, rng_seed=5)
        factor = dense_factor(K[:30, :30], rank=params.width)
        grown = seq_update(factor, K[:30, 30:], K[30:, 30:], params)
        bound = cumulative_error_bound(
            params.width,
            params.k,
            [singular_values(K[:30, :30]), singular_values(K)],
        )
        assert spectral_norm(K - grown.dense()) <= bound

    def test_empty_update_keeps_error_bounded(self):
        rng = np.random.default_rng(2)
        x = np.sort(rng.uniform(0, 5, size=25))
        K = se_gram(x)
        params = SketchParams(k=6, p=4, rng_seed=8)
        factor = dense_factor(K, rank=params.width)
        before = spectral_norm(K - factor.dense())
        regrown = seq_update(factor, np.zeros((25, 0)), np.zeros((0, 0)), params)
        assert regrown.n == 25
        eps = (1.0 + 9.0 * np.sqrt(params.width * 25)) * singular_values(K)[params.k]
        assert spectral_norm(K - regrown.dense()) <= before + 2.0 * eps

    def test_rank_deficient_stream_stays_exact(self):
        # data confined to a k-dimensional subspace: tail singular values
        # vanish at every step, so the factorization stays essentially exact
        rng = np.random.default_rng(33)
        k = 6
        basis = np.linalg.qr(rng.standard_normal((90, k)))[0]
        coeffs = rng.standard_normal((k, k))
        G = basis @ coeffs  # rank-k points
        params = SketchParams(k=k, p=4, rng_seed=13)
        sizes = [30, 20, 20, 20]
        edges = np.cumsum([0] + sizes)
        gram = G @ G.T
        factor = dense_factor(gram[:30, :30], rank=params.width)
        for t in range(1, len(sizes)):
            lo, hi = edges[t], edges[t + 1]
            factor = seq_update(
                factor,
                gram[: edges[t], lo:hi],
                gram[lo:hi, lo:hi],
                params.child(t),
            )
            full = gram[:hi, :hi]
            assert spectral_norm(full - factor.dense()) <= 1e-8 * spectral_norm(full)

    def test_exact_when_sketch_covers_dimension(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal((30, 2))
        K = se_gram(x[:, 0])
        params = SketchParams(k=25, p=5, rng_seed=4)  # width == final size
        factor = dense_factor(K[:20, :20])
        grown = seq_update(factor, K[:20, 20:], K[20:, 20:], params)
        assert spectral_norm(K - grown.dense()) <= 1e-8 * spectral_norm(K)

    def test_width_beyond_dimension_raises(self):
        factor = dense_factor(np.eye(4))
        params = SketchParams(k=8, p=4)
        with pytest.raises(SketchWidthError):
            seq_update(factor, np.zeros((4, 2)), np.zeros((2, 2)), params)

    def test_determinism(self):
        rng = np.random.default_rng(6)
        x = np.sort(rng.uniform(0, 5, size=30))
        K = se_gram(x)
        params = SketchParams(k=5, p=3, rng_seed=77)
        factor = dense_factor(K[:20, :20], rank=8)
        a = seq_update(factor, K[:20, 20:], K[20:, 20:], params)
        b = seq_update(factor, K[:20, 20:], K[20:, 20:], params)
        assert np.array_equal(a.U, b.U)
        assert np.array_equal(a.S, b.S)

    def test_cumulative_bound_across_seeds(self):
        # random PSD streams, n <= 200, T = 10: the accumulated bound holds
        # in at least 95 of 100 seeded runs
        params_base = SketchParams(k=8, p=4)
        hits = 0
        trials = 100
        for seed in range(trials):
            rng = np.random.default_rng(seed)
            pts = rng.uniform(-2, 2, size=(200, 2))
            ls = rng.uniform(0.4, 1.5)
            diff = pts[:, None, :] - pts[None, :, :]
            K = np.exp(-np.sum(diff**2, axis=2) / (2 * ls**2))
            params = SketchParams(k=8, p=4, rng_seed=seed)
            sizes = np.full(10, 20)
            edges = np.cumsum(np.concatenate([[0], sizes]))
            factor = dense_factor(K[:20, :20], rank=params.width)
            spectra = [singular_values(K[:20, :20])]
            ok = True
            for t in range(1, 10):
                lo, hi = edges[t], edges[t + 1]
                factor = seq_update(
                    factor, K[:lo, lo:hi], K[lo:hi, lo:hi], params.child(t)
                )
                full = K[:hi, :hi]
                spectra.append(singular_values(full))
                bound = cumulative_error_bound(params.width, params.k, spectra)
                if spectral_norm(full - factor.dense()) > bound:
                    ok = False
                    break
            hits += ok
        assert hits >= 95, f"bound held in only {hits}/{trials} runs"

    def test_update_time_scales_linearly(self):
        # wall-time slope over n in {500, 1000, 2000, 4000} at fixed k, b
        try:
            from threadpoolctl import threadpool_limits
        except ImportError:
            pytest.skip("threadpoolctl unavailable")
        params = SketchParams(k=10, p=5, rng_seed=0)
        rng = np.random.default_rng(0)
        sizes = [500, 1000, 2000, 4000]
        times = []
        with threadpool_limits(1):
            for n in sizes:
                factor = random_factor(n, params.width, seed=n)
                B = rng.standard_normal((n, 50))
                C = rng.standard_normal((50, 50))
                C = 0.5 * (C + C.T)
                best = np.inf
                for _ in range(5):
                    t0 = time.perf_counter()
                    seq_update(factor, B, C, params)
                    best = min(best, time.perf_counter() - t0)
                times.append(best)
        slope = np.polyfit(np.log(sizes), np.log(times), 1)[0]
        assert slope < 1.4, f"seq_update slope {slope:.2f} (times {times})"


class TestFactorObject:
    def test_orthonormality_enforced(self):
        bad_u = np.ones((4, 2))
        with pytest.raises(ConstraintError):
            SymEigFactor(bad_u, np.ones(2))

    def test_apply_matches_dense(self):
        factor = random_factor(12, 5, seed=1)
        rng = np.random.default_rng(2)
        v = rng.standard_normal(12)
        assert np.allclose(factor.apply(v), factor.dense() @ v, atol=1e-12)
        block = rng.standard_normal((12, 3))
        assert np.allclose(factor.apply(block), factor.dense() @ block, atol=1e-12)

    def test_dump_round_trip(self, tmp_path):
        factor = random_factor(9, 4, seed=8)
        path = tmp_path / "factor.txt"
        save_factor(factor, path)
        loaded = load_factor(path)
        assert np.array_equal(loaded.U, factor.U)
        assert np.array_equal(loaded.S, factor.S)

    def test_dump_round_trip_rank_zero(self, tmp_path):
        path = tmp_path / "empty.txt"
        save_factor(empty_factor(5), path)
        loaded = load_factor(path)
        assert loaded.n == 5 and loaded.r == 0
