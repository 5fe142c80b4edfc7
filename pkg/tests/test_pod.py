import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mongerb.pod import (
    correlation_matrix,
    energy,
    jacobi_eigh,
    pod_from_correlation,
    retained_count,
    symmetric_eigendecomposition,
    write_spectrum,
)


def random_symmetric(rng, n):
    A = rng.normal(size=(n, n))
    return A + A.T


def projection_residual(S, basis_rows):
    """Sum of squared residuals of the rows of ``S`` outside ``span(basis_rows)``."""
    P = basis_rows.T @ basis_rows
    return float(np.sum((S - S @ P) ** 2))


class TestEigendecomposition:
    def test_diagonal(self):
        lam, V = symmetric_eigendecomposition(np.diag([1.0, 3.0]))
        np.testing.assert_allclose(lam, [3.0, 1.0])
        np.testing.assert_allclose(np.abs(V), [[0, 1], [1, 0]], atol=1e-15)

    def test_two_by_two(self):
        lam, V = symmetric_eigendecomposition(np.array([[2.0, 1.0], [1.0, 2.0]]))
        np.testing.assert_allclose(lam, [3.0, 1.0], atol=1e-14)
        np.testing.assert_allclose(np.abs(V), np.full((2, 2), 1 / np.sqrt(2)), atol=1e-14)

    @pytest.mark.parametrize("method", ["jacobi", "lapack", "auto"])
    def test_random_residual(self, method, rng):
        C = random_symmetric(rng, 20)
        lam, V = symmetric_eigendecomposition(C, method=method)
        lmax = np.abs(lam).max()
        assert np.max(np.abs(C @ V - V * lam)) <= 1e-9 * lmax
        np.testing.assert_allclose(V.T @ V, np.eye(20), atol=1e-12)
        np.testing.assert_allclose((V * lam) @ V.T, C, atol=1e-9 * lmax)

    def test_jacobi_matches_lapack(self, rng):
        C = random_symmetric(rng, 15)
        a, Va = symmetric_eigendecomposition(C, "jacobi")
        b, Vb = symmetric_eigendecomposition(C, "lapack")
        np.testing.assert_allclose(a, b, atol=1e-11)
        np.testing.assert_allclose(Va, Vb, atol=1e-8)

    def test_sign_convention(self, rng):
        _, V = symmetric_eigendecomposition(random_symmetric(rng, 8))
        idx = np.argmax(np.abs(V), axis=0)
        assert np.all(V[idx, np.arange(8)] > 0)

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            symmetric_eigendecomposition(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_jacobi_sweep_limit(self, rng):
        from mongerb.pod import EigenConvergenceError

        with pytest.raises(EigenConvergenceError):
            jacobi_eigh(random_symmetric(rng, 30), rtol=1e-300, max_sweeps=1)


class TestPod:
    def test_identity(self):
        pod = pod_from_correlation(np.eye(5), 1e-4)
        assert pod.n == 5
        np.testing.assert_allclose(pod.eigenvalues, 1.0)

    def test_rank_one(self):
        t = np.array([0.1, 0.4, 0.7, 1.0])
        pod = pod_from_correlation(np.outer(t, t), 1e-6)
        assert pod.n == 1
        assert pod.eigenvalues[0] == pytest.approx(np.sum(t**2))
        assert pod.rank == 1

    def test_rank_two_eckart_young(self, rng):
        A = rng.normal(size=(50, 2))
        S = A @ rng.normal(size=(2, 7))
        S = S.T
        C = correlation_matrix(S)
        pod = pod_from_correlation(C, 1e-10)
        assert pod.n == 2
        lam_full, _ = np.linalg.eigh(C)
        lam_full = lam_full[::-1]
        modes = pod.truncate(1).modes(S)
        assert projection_residual(S, modes) == pytest.approx(lam_full[1:].sum(), rel=1e-8)

    def test_zero_matrix_rejected(self):
        with pytest.raises(ValueError):
            pod_from_correlation(np.zeros((3, 3)), 1e-3)

    @pytest.mark.parametrize("tau", [0.0, 1.0])
    def test_tau_range(self, tau):
        with pytest.raises(ValueError):
            pod_from_correlation(np.eye(2), tau)

    def test_modes_orthonormal_in_inner_product(self, rng):
        M = np.diag(rng.uniform(0.5, 2.0, 30))
        S = rng.normal(size=(8, 30))
        pod = pod_from_correlation(correlation_matrix(S, M), 1e-12)
        Z = pod.modes(S)
        np.testing.assert_allclose(Z @ M @ Z.T, np.eye(pod.n), atol=1e-8)

    def test_snapshot_coordinates_reproduce_snapshots(self, rng):
        S = rng.normal(size=(6, 40))
        pod = pod_from_correlation(correlation_matrix(S), 1e-14)
        np.testing.assert_allclose(pod.snapshot_coordinates().T @ pod.modes(S), S, atol=1e-10)

    @given(st.integers(0, 2**32 - 1), st.integers(2, 12), st.integers(1, 6))
    def test_eckart_young_every_n(self, seed, n_s, rank):
        rng = np.random.default_rng(seed)
        S = rng.normal(size=(n_s, rank)) @ rng.normal(size=(rank, 25)) + 1e-3 * rng.normal(size=(n_s, 25))
        C = correlation_matrix(S)
        pod = pod_from_correlation(C, 1e-15)
        lam = pod.eigenvalues
        for n in range(1, pod.rank + 1):
            res = projection_residual(S, pod.truncate(n).modes(S))
            tail = lam[n:].sum()
            assert res == pytest.approx(tail, rel=1e-8, abs=1e-10 * lam[0])

    @given(st.lists(st.floats(0.0, 10.0), min_size=2, max_size=15).filter(lambda v: max(v) > 0),
           st.floats(1e-8, 0.5), st.floats(1e-8, 0.5))
    def test_retained_count_monotone_in_tau(self, lam, t1, t2):
        lam = np.sort(np.array(lam))[::-1]
        lo, hi = sorted((t1, t2))
        assert retained_count(lam, hi) <= retained_count(lam, lo)
        m = retained_count(lam, lo)
        assert 1 - energy(lam, m) < lo or m == int(np.sum(lam > 1e-12 * lam.max()))


def test_spectrum_file(tmp_path):
    write_spectrum(tmp_path / "s.dat", np.array([2.0, 0.5]), header="a\nb")
    assert (tmp_path / "s.dat").read_text().splitlines() == ["# a", "# b", "1 2", "2 0.5"]
