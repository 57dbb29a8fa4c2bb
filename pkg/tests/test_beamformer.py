import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import null_space

from dnbd.beamformer import (Criterion, DegenerateConstraintError, FusionError, FusionState,
                             SingularCovarianceError, assemble_block_diagonal, block_diagonal,
                             build_basis, centralized_lcmv, dnbd_fuse, dnbd_process, dnbd_weights,
                             dnds_weights, lcmv_weights, node_blocks, node_output, select_covariance,
                             solve_fused)
from dnbd.beamformer import compress, compression_matrix, constraint_block
from dnbd.experiment import ExperimentSpec, prepare
from dnbd.covariance import estimate_block_entire_horizon, estimate_noisy_block
from dnbd.scene import default_scene, perturb_training_positions, steering_matrix
from dnbd.stft import AnalysisConfig

from conftest import crandn, random_network, random_pd


def kkt_solution(R, Q, g):
    """Minimiser of w^H R w subject to Q^H w = g from the full KKT system."""
    M, S = Q.shape
    K = np.block([[R, Q], [Q.conj().T, np.zeros((S, S))]])
    sol = np.linalg.solve(K, np.concatenate([np.zeros(M), g]))
    return sol[:M]


def quad(w, R):
    return float(np.real(np.vdot(w, R @ w)))


class TestBasis:
    def test_gains_from_reference_rows(self, rng):
        Q = crandn(rng, 24, 2)
        basis = build_basis(Q, [6] * 4)
        assert basis.Q.shape == (24, 2) and basis.gbar.shape == (4, 2)
        for j in range(4):
            assert basis.gbar[j, 0] == np.conj(Q[6 * j, 0])
            assert basis.gbar[j, 1] == 0

    def test_degenerate(self, rng):
        q = crandn(rng, 6, 1)
        with pytest.raises(DegenerateConstraintError, match="degenerate constraint set"):
            build_basis(np.hstack([q, 2 * q]), [3, 3])

    def test_row_count_mismatch(self, rng):
        with pytest.raises(ValueError):
            build_basis(crandn(rng, 5, 1), [3, 3])


class TestCentralized:
    def test_identity_is_matched_filter(self, rng):
        q = crandn(rng, 5, 1)
        basis = build_basis(q, [5])
        w = centralized_lcmv(np.eye(5), basis, 0)
        expected = q[:, 0] * np.conj(q[0, 0]) / np.vdot(q[:, 0], q[:, 0])
        assert np.allclose(w, expected, atol=1e-14)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_constraints_met(self, seed):
        rng = np.random.default_rng(seed)
        basis, blocks = random_network(rng)
        R = random_pd(rng, sum(basis.node_sizes))
        for j in range(basis.n_nodes):
            w = centralized_lcmv(R, basis, j)
            assert np.allclose(basis.Q.conj().T @ w, basis.gbar[j], atol=1e-8)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_kkt_oracle(self, seed):
        rng = np.random.default_rng(seed)
        basis = build_basis(crandn(rng, 6, 2), [6], [[1, 0]])
        R = random_pd(rng, 6)
        w = centralized_lcmv(R, basis, 0)
        w_ref = kkt_solution(R, basis.Q, basis.gbar[0])
        assert quad(w, R) == pytest.approx(quad(w_ref, R), rel=1e-8)
        # every feasible direction increases the objective
        N = null_space(basis.Q.conj().T)
        for _ in range(20):
            v = N @ crandn(rng, N.shape[1])
            assert quad(w + 1e-3 * v, R) >= quad(w, R)

    def test_singular_covariance(self, rng):
        basis = build_basis(crandn(rng, 4, 1), [4])
        R = np.zeros((4, 4))
        R[0, 0] = 1.0
        with pytest.raises(SingularCovarianceError, match="condition number"):
            centralized_lcmv(R, basis, 0)

    def test_lcmp_selector(self, rng):
        Rn, Ry = random_pd(rng, 3), random_pd(rng, 3)
        assert select_covariance(Criterion.NOISE, Rn, Ry) is Rn
        assert select_covariance("noisy", Rn, Ry) is Ry


class TestDNDS:
    def test_equals_identity_lcmv(self, rng):
        basis, _ = random_network(rng)
        for j in range(basis.n_nodes):
            w = centralized_lcmv(np.eye(sum(basis.node_sizes)), basis, j)
            assert np.allclose(dnds_weights(basis, j), w, atol=1e-12)

    def test_orthonormal_basis(self, rng):
        Q, _ = np.linalg.qr(crandn(rng, 8, 3))
        basis = build_basis(Q, [4, 4], [[1, 0, 1], [0, 1, 0]])
        for j in range(2):
            assert np.allclose(dnds_weights(basis, j), Q @ basis.gbar[j], atol=1e-14)

    def test_delay_and_sum(self, rng):
        M = 7
        q = np.exp(1j * rng.uniform(0, 2 * np.pi, M))[:, None]
        basis = build_basis(q, [3, 4])
        for j in range(2):
            assert np.allclose(dnds_weights(basis, j), q[:, 0] * basis.gbar[j, 0] / M, atol=1e-15)

    def test_dnbd_with_identity_blocks(self, rng):
        basis, _ = random_network(rng)
        eye = [np.eye(m) for m in basis.node_sizes]
        y = crandn(rng, 30, sum(basis.node_sizes))
        for j in range(basis.n_nodes):
            a = y @ np.conj(dnbd_weights(eye, basis, j))
            b = y @ np.conj(dnds_weights(basis, j))
            assert np.max(np.abs(a - b)) <= 1e-12 * max(1.0, np.max(np.abs(b)))


class TestFusion:
    def test_single_node_is_local_lcmv(self, rng):
        basis = build_basis(crandn(rng, 4, 2), [4])
        R = random_pd(rng, 4)
        y = crandn(rng, 4)
        A = compression_matrix(basis.Q, cov=R)
        fus = dnbd_fuse([constraint_block(basis.Q, A)], [compress(A, y)])
        assert np.allclose(fus.z_tilde, np.linalg.solve(constraint_block(basis.Q, A), compress(A, y)))
        assert node_output(fus, basis, 0) == pytest.approx(np.vdot(centralized_lcmv(R, basis, 0), y))

    def test_equal_blocks_cancel(self, rng):
        v = crandn(rng, 2)
        fus = dnbd_fuse([np.eye(2)] * 4, [v] * 4)
        assert np.allclose(fus.z_tilde, v, atol=1e-15)
        assert np.allclose(fus.D, 4 * np.eye(2))

    def test_singular_aggregate(self):
        with pytest.raises(FusionError, match="insufficient aggregate constraints"):
            dnbd_fuse([np.diag([1.0, 0.0])], [np.ones(2)])

    def test_pinv_fallback_warns(self):
        D = np.diag([2.0, 0.0]).astype(complex)
        with pytest.warns(RuntimeWarning):
            zt = solve_fused(D, np.array([2.0, 5.0], dtype=complex), pinv_fallback=True)
        assert np.allclose(zt, [1.0, 0.0])

    def test_block_size_mismatch(self):
        with pytest.raises(ValueError):
            dnbd_fuse([np.eye(2), np.eye(3)], [np.ones(2), np.ones(3)])

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_equals_block_diagonal_oracle(self, seed):
        rng = np.random.default_rng(seed)
        basis, blocks = random_network(rng)
        R = assemble_block_diagonal(blocks)
        y = crandn(rng, sum(basis.node_sizes))
        A = [compression_matrix(basis.block(q), cov=b) for q, b in enumerate(blocks)]
        sl = np.cumsum([0, *basis.node_sizes])
        fus = dnbd_fuse([constraint_block(basis.block(q), a) for q, a in enumerate(A)],
                        [compress(a, y[sl[q]:sl[q + 1]]) for q, a in enumerate(A)])
        for j in range(basis.n_nodes):
            d = np.vdot(centralized_lcmv(R, basis, j), y)
            assert abs(node_output(fus, basis, j) - d) <= 1e-10 * max(1.0, abs(d))

    def test_batched_process_matches_weights(self, rng):
        sizes = [3, 2, 4]
        Q = crandn(rng, 5, 9, 2)
        basis = build_basis(Q, sizes)
        blocks = [np.stack([random_pd(rng, m) for _ in range(5)]) for m in sizes]
        Y = crandn(rng, 11, 5, 9)
        out = dnbd_process(Y, blocks, basis)
        for j in range(3):
            w = dnbd_weights(blocks, basis, j)
            assert np.allclose(out[..., j], np.einsum("fm,lfm->lf", np.conj(w), Y), atol=1e-12)


class TestNodeOutput:
    def test_zero_gain(self, rng):
        fus = FusionState(crandn(rng, 3))
        assert node_output(fus, np.zeros(3)) == 0

    def test_same_reference_same_output(self, rng):
        basis = build_basis(crandn(rng, 6, 2), [3, 3], reference_rows=[0, 0])
        fus = FusionState(crandn(rng, 2))
        assert node_output(fus, basis, 0) == node_output(fus, basis, 1)

    def test_distortionless_on_anechoic_scene(self, rng):
        spec = default_scene(t60=0.0)
        cfg = AnalysisConfig()
        H = steering_matrix(spec, spec.speakers, cfg)[1:]  # (F, M, S), DC bin excluded
        S_sig = crandn(rng, 40, H.shape[0], 2)
        X = np.einsum("fms,lfs->lfm", H, S_sig)  # noiseless speech images
        basis = build_basis(H, spec.node_sizes)
        blocks = [np.stack([random_pd(rng, m) for _ in range(H.shape[0])]) for m in spec.node_sizes]
        out = dnbd_process(X, blocks, basis)
        for j, ref in enumerate(spec.reference_rows):
            target = H[None, :, ref, 0] * S_sig[..., 0]
            assert np.max(np.abs(out[..., j] - target)) <= 1e-8 * np.max(np.abs(target))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_basis_scaling_invariance(seed):
    rng = np.random.default_rng(seed)
    basis, blocks = random_network(rng)
    sigma = crandn(rng, basis.n_sources)
    scaled = basis.scaled(sigma)
    R = assemble_block_diagonal(blocks)
    y = crandn(rng, 10, sum(basis.node_sizes))
    for j in range(basis.n_nodes):
        for a, b in [(dnbd_weights(blocks, basis, j), dnbd_weights(blocks, scaled, j)),
                     (centralized_lcmv(R, basis, j), centralized_lcmv(R, scaled, j)),
                     (dnds_weights(basis, j), dnds_weights(scaled, j))]:
            da, db = y @ np.conj(a), y @ np.conj(b)
            assert np.max(np.abs(da - db)) <= 1e-10 * max(1.0, np.max(np.abs(da)))


def test_block_helpers(rng):
    R = random_pd(rng, 5)
    B = block_diagonal(R, [2, 3])
    assert np.array_equal(B[:2, 2:], np.zeros((2, 3)))
    assert np.array_equal(assemble_block_diagonal(node_blocks(R, [2, 3])), B)


class TestLCMP:
    def test_noise_only_equals_lcmv(self, rng):
        basis, _ = random_network(rng)
        noise = crandn(rng, 400, sum(basis.node_sizes))
        R_nn = estimate_block_entire_horizon(noise, noise, [])
        R_yy = estimate_noisy_block(noise)
        for j in range(basis.n_nodes):
            a = lcmv_weights(R_nn, basis.Q, basis.gbar[j])
            b = lcmv_weights(R_yy, basis.Q, basis.gbar[j])
            assert np.max(np.abs(a - b)) <= 1e-6 * np.max(np.abs(a))

    def test_distortionless_with_speech(self, rng):
        basis, _ = random_network(rng)
        M = sum(basis.node_sizes)
        y = crandn(rng, 300, M) + np.outer(crandn(rng, 300), basis.Q[:, 0]) * 5
        R_yy = estimate_noisy_block(y)
        for j in range(basis.n_nodes):
            w = centralized_lcmv(R_yy, basis, j)
            assert np.allclose(basis.Q.conj().T @ w, basis.gbar[j], atol=1e-8)

    def test_perturbed_basis_cancels_target(self):
        spec = ExperimentSpec(duration_s=8.0, frame_length=1024, repetitions=1)
        rs = prepare(spec, 0.3)
        scene, cfg = rs.scene, rs.cfg
        pos = perturb_training_positions(scene, [0.05, 0.05], np.random.default_rng(3))
        bins = slice(1, None)
        Q = steering_matrix(scene, pos, cfg)[bins]
        Xs = rs.Y_speech[:, :, bins]
        Y = Xs.sum(axis=0) + rs.Y_noise[:, bins]
        R_nn = estimate_block_entire_horizon(Y, rs.Y_noise[:, bins], [])
        R_yy = estimate_noisy_block(Y)
        basis = build_basis(Q, scene.node_sizes)
        for j in range(len(scene.nodes)):
            w_v = centralized_lcmv(R_nn, basis, j)
            w_p = centralized_lcmv(R_yy, basis, j)
            p_v = np.sum(np.abs(np.einsum("fm,lfm->lf", np.conj(w_v), Xs[0])) ** 2)
            p_p = np.sum(np.abs(np.einsum("fm,lfm->lf", np.conj(w_p), Xs[0])) ** 2)
            assert p_p < p_v
