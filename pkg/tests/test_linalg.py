"""Sparse/dense kernels against brute-force linear algebra."""

import math

import numpy as np
import pytest
import scipy.sparse as sp

from loofit import rng
from loofit.linalg import (
    DegenerateLeaveOneOutError,
    NotPositiveDefiniteError,
    SparseMatrix,
    cholesky,
    conditional_gauss_dense,
    factorization_count,
    load_sparse_txt,
    loo_inverse_update,
    save_sparse_txt,
    spmv,
)


def random_spd(g, n, jitter=None):
    a = g.normal(size=(n, n))
    return a @ a.T + (jitter if jitter is not None else n) * np.eye(n)


class TestSparseMatrix:
    def test_identity_matvec(self):
        m = SparseMatrix.from_scipy(sp.eye(5, format="csr"), symmetric=True)
        x = np.arange(5.0)
        assert np.array_equal(spmv(m, x), x)

    def test_tridiagonal_row_sums(self):
        m = SparseMatrix.from_scipy(sp.csr_matrix(np.array([[2.0, -1.0], [-1.0, 2.0]])))
        assert np.array_equal(spmv(m, np.ones(2)), np.ones(2))

    def test_random_matches_dense(self):
        g = rng.stream(201)
        dense = g.normal(size=(50, 50)) * (g.uniform(size=(50, 50)) < 0.1)
        m = SparseMatrix.from_scipy(sp.csr_matrix(dense))
        x = g.normal(size=50)
        assert np.abs(spmv(m, x) - dense @ x).max() < 1e-12

    def test_dimension_mismatch(self):
        m = SparseMatrix.from_scipy(sp.eye(4, format="csr"))
        with pytest.raises(ValueError, match="dimension"):
            spmv(m, np.ones(5))

    def test_linearity(self):
        g = rng.stream(202)
        dense = g.normal(size=(30, 30)) * (g.uniform(size=(30, 30)) < 0.2)
        m = SparseMatrix.from_scipy(sp.csr_matrix(dense))
        x, z = g.normal(size=30), g.normal(size=30)
        a, b = 0.7, -1.3
        lhs = spmv(m, a * x + b * z)
        rhs = a * spmv(m, x) + b * spmv(m, z)
        assert np.abs(lhs - rhs).max() < 1e-12

    def test_rejects_unsorted_columns(self):
        with pytest.raises(ValueError, match="strictly increasing"):
            SparseMatrix(2, 2, [0, 2, 2], [1, 0], [1.0, 2.0])

    def test_rejects_bad_offsets(self):
        with pytest.raises(ValueError):
            SparseMatrix(2, 2, [0, 3, 2], [0, 1, 0], [1.0, 2.0, 3.0])

    def test_symmetric_flag_checked(self):
        dense = np.array([[1.0, 2.0], [0.0, 1.0]])
        with pytest.raises(ValueError, match="symmetric"):
            SparseMatrix.from_scipy(sp.csr_matrix(dense), symmetric=True)

    def test_roundtrip_text_io(self, tmp_path):
        g = rng.stream(203)
        dense = g.normal(size=(7, 9)) * (g.uniform(size=(7, 9)) < 0.3)
        m = SparseMatrix.from_scipy(sp.csr_matrix(dense))
        path = tmp_path / "m.txt"
        save_sparse_txt(path, m)
        header = path.read_text().splitlines()[0].split()
        assert [int(h) for h in header] == [7, 9, m.nnz]
        back = load_sparse_txt(path)
        assert np.array_equal(back.toarray(), m.toarray())


class TestCholesky:
    def test_identity(self):
        f = cholesky(np.eye(4))
        assert np.array_equal(f.L, np.eye(4))
        assert f.log_det == 0.0

    def test_hand_example(self):
        f = cholesky(np.array([[4.0, 2.0], [2.0, 3.0]]))
        assert np.allclose(f.L, [[2.0, 0.0], [1.0, math.sqrt(2.0)]])
        assert f.log_det == pytest.approx(math.log(8.0), rel=1e-12)

    def test_logdet_matches_eigenvalues(self):
        from loofit.gmrf import LatticeSpec, ModelKind, ModelSpec, Theta, \
            build_fem_matrices, build_precision

        lat = LatticeSpec(5, 5)
        c, g = build_fem_matrices(lat)
        q = build_precision(Theta.from_natural(0.5, 1.2), ModelSpec(ModelKind.DIRECT, lat), c, g)
        f = cholesky(q.toarray())
        eig = np.linalg.eigvalsh(q.toarray())
        assert f.log_det == pytest.approx(np.sum(np.log(eig)), abs=1e-8)

    def test_roundtrip_tolerance(self):
        g = rng.stream(204)
        for n in (5, 20, 60):
            m = random_spd(g, n)
            f = cholesky(m)
            err = np.abs(f.L @ f.L.T - m).max()
            assert err <= 1e-10 * np.abs(m).max()

    def test_not_positive_definite_carries_pivot(self):
        m = np.diag([1.0, -1.0, 2.0])
        with pytest.raises(NotPositiveDefiniteError) as exc:
            cholesky(m)
        assert exc.value.pivot == 1

    def test_counter_increments(self):
        before = factorization_count()
        cholesky(np.eye(3))
        assert factorization_count() == before + 1

    def test_solve(self):
        g = rng.stream(205)
        m = random_spd(g, 12)
        f = cholesky(m)
        b = g.normal(size=12)
        assert np.abs(m @ f.solve(b) - b).max() < 1e-9


class TestLooInverseUpdate:
    def test_identity(self):
        eye = np.eye(6)
        out = loo_inverse_update(eye, eye, 3)
        assert np.allclose(out, np.eye(5))

    def test_two_by_two_hand(self):
        sigma = np.array([[2.0, 1.0], [1.0, 2.0]]) / 3.0
        sigma_inv = np.array([[2.0, -1.0], [-1.0, 2.0]])
        out = loo_inverse_update(sigma_inv, sigma, 1)
        assert out.shape == (1, 1)
        assert out[0, 0] == pytest.approx(1.5, rel=1e-12)

    def test_matches_direct_inversion(self):
        g = rng.stream(206)
        sigma = random_spd(g, 30)
        sigma_inv = np.linalg.inv(sigma)
        for i in range(30):
            got = loo_inverse_update(sigma_inv, sigma, i)
            keep = np.arange(30) != i
            want = np.linalg.inv(sigma[np.ix_(keep, keep)])
            assert np.abs(got - want).max() <= 1e-8 * np.abs(want).max()

    def test_index_out_of_range(self):
        eye = np.eye(3)
        with pytest.raises(IndexError):
            loo_inverse_update(eye, eye, 3)

    def test_degenerate_reported(self):
        # sigma is invertible but the submatrix without row/col 2 is singular,
        # which makes the 2x2 capacitance matrix singular
        sigma = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 1.0]])
        with pytest.raises(DegenerateLeaveOneOutError, match="index 2"):
            loo_inverse_update(np.linalg.inv(sigma), sigma, 2)


class TestConditionalGaussDense:
    def test_hand_example(self):
        sigma = np.array([[2.0, 1.0], [1.0, 2.0]]) / 3.0
        p = conditional_gauss_dense(np.zeros(2), sigma, np.array([0.0, 1.0]), 0)
        assert p.mu == pytest.approx(0.5, rel=1e-12)
        assert p.sigma == pytest.approx(math.sqrt(0.5), rel=1e-12)

    def test_diagonal_independence(self):
        g = rng.stream(207)
        var = g.uniform(0.5, 2.0, size=6)
        mu = g.normal(size=6)
        y = g.normal(size=6)
        for i in range(6):
            p = conditional_gauss_dense(mu, np.diag(var), y, i)
            assert p.mu == pytest.approx(mu[i], rel=1e-12)
            assert p.sigma == pytest.approx(math.sqrt(var[i]), rel=1e-12)

    def test_precision_form_agreement(self):
        # covariance-form conditional equals the precision-form identities
        g = rng.stream(208)
        sigma = random_spd(g, 20)
        q = np.linalg.inv(sigma)
        mu = g.normal(size=20)
        y = g.normal(size=20)
        for i in range(20):
            p = conditional_gauss_dense(mu, sigma, y, i)
            mean = mu[i] - (q[i] @ (y - mu) - q[i, i] * (y[i] - mu[i])) / q[i, i]
            sd = 1.0 / math.sqrt(q[i, i])
            assert p.mu == pytest.approx(mean, abs=1e-9)
            assert p.sigma == pytest.approx(sd, abs=1e-9)
