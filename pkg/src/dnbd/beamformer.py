"""Constraint bases, centralized LCMV/LCMP and the distributed fusion.

Arrays may carry leading batch axes (typically frequency bins): a basis
``Q`` is ``(..., M, S)``, a covariance ``(..., M, M)``, a weight vector
``(..., M)``.
"""

from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .covariance import hermitize
from .stft import node_slices

log = logging.getLogger(__name__)

RANK_TOL = 1e-10
PINV_RCOND = 1e-10


class DegenerateConstraintError(ValueError):
    pass


class SingularCovarianceError(np.linalg.LinAlgError):
    pass


class FusionError(np.linalg.LinAlgError):
    pass


class Criterion(str, enum.Enum):
    """Which covariance the constrained minimisation uses."""

    NOISE = "noise"   # LCMV
    NOISY = "noisy"   # LCMP


def select_covariance(criterion: Criterion, noise_cov: np.ndarray, noisy_cov: np.ndarray) -> np.ndarray:
    return noise_cov if Criterion(criterion) is Criterion.NOISE else noisy_cov


def _ct(A: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(A, -1, -2))


@dataclass
class ConstraintBasis:
    """Column-space basis ``Q`` with per-node desired responses.

    ``selection[j, k]`` is the binary desired response of node ``j`` towards
    source ``k``; the effective response vector is
    ``gbar[..., j, k] = selection[j, k] * conj(Q[..., m_j, k])`` with ``m_j``
    the node's reference row.
    """

    Q: np.ndarray
    node_sizes: tuple[int, ...]
    selection: np.ndarray
    reference_rows: list[int]

    @property
    def n_nodes(self) -> int:
        return len(self.node_sizes)

    @property
    def n_sources(self) -> int:
        return self.Q.shape[-1]

    @property
    def gbar(self) -> np.ndarray:
        ref = np.conj(self.Q[..., self.reference_rows, :])
        return self.selection * ref

    def block(self, j: int) -> np.ndarray:
        return self.Q[..., node_slices(self.node_sizes)[j], :]

    def scaled(self, sigma: np.ndarray) -> "ConstraintBasis":
        """Same column space with columns multiplied by ``sigma`` (``(..., S)``)."""
        return ConstraintBasis(self.Q * np.asarray(sigma)[..., None, :], self.node_sizes,
                               self.selection, self.reference_rows)


def build_basis(steering: np.ndarray, node_sizes: Sequence[int], selection=None,
                reference_rows: Sequence[int] | None = None) -> ConstraintBasis:
    """Wrap a stacked steering/basis matrix ``(..., M, S)`` as a :class:`ConstraintBasis`.

    By default every node selects source 1 and references its first microphone.
    """
    Q = np.asarray(steering, dtype=complex)
    node_sizes = tuple(int(m) for m in node_sizes)
    if Q.shape[-2] != sum(node_sizes):
        raise ValueError(f"basis has {Q.shape[-2]} rows, node layout needs {sum(node_sizes)}")
    S = Q.shape[-1]
    if selection is None:
        selection = np.zeros((len(node_sizes), S))
        selection[:, 0] = 1
    selection = np.asarray(selection, dtype=float)
    if selection.shape != (len(node_sizes), S):
        raise ValueError(f"selection must be (J, S) = {(len(node_sizes), S)}")
    if reference_rows is None:
        reference_rows = [int(v) for v in np.concatenate([[0], np.cumsum(node_sizes)[:-1]])]
    sv = np.linalg.svd(Q, compute_uv=False)
    if np.any(sv[..., -1] <= RANK_TOL * sv[..., 0]):
        raise DegenerateConstraintError("degenerate constraint set: basis is not full column rank")
    return ConstraintBasis(Q, node_sizes, selection, list(reference_rows))


def _spd_solve(R: np.ndarray, B: np.ndarray, what: str) -> np.ndarray:
    try:
        np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        cond = np.linalg.cond(R)
        raise SingularCovarianceError(
            f"{what} is not positive definite (max condition number {np.max(cond):.3e})"
        ) from None
    return np.linalg.solve(R, B)


def lcmv_weights(R: np.ndarray, Q: np.ndarray, gbar: np.ndarray) -> np.ndarray:
    """``R^-1 Q (Q^H R^-1 Q)^-1 gbar`` via Hermitian solves."""
    RiQ = _spd_solve(hermitize(R), Q, "covariance")
    G = hermitize(_ct(Q) @ RiQ)
    lam = _spd_solve(G, gbar[..., None], "Q^H R^-1 Q")
    return (RiQ @ lam)[..., 0]


def centralized_lcmv(R: np.ndarray, basis: ConstraintBasis, j: int) -> np.ndarray:
    """Centralized node-specific LCMV (or LCMP, if ``R`` is the noisy covariance) weights."""
    return lcmv_weights(R, basis.Q, basis.gbar[..., j, :])


def dnds_weights(basis: ConstraintBasis, j: int) -> np.ndarray:
    """Delay-and-sum weights ``Q (Q^H Q)^-1 gbar_j``; depend only on the basis."""
    G = hermitize(_ct(basis.Q) @ basis.Q)
    lam = _spd_solve(G, basis.gbar[..., j, :][..., None], "Q^H Q")
    return (basis.Q @ lam)[..., 0]


def apply_weights(w: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Output ``w^H y`` for weights ``(..., M)`` and observations ``(L, ..., M)``."""
    return np.einsum("...m,l...m->l...", np.conj(w), Y)


def block_diagonal(R: np.ndarray, node_sizes: Sequence[int]) -> np.ndarray:
    """Zero every cross-node block of ``R``."""
    out = np.zeros_like(R)
    for sl in node_slices(node_sizes):
        out[..., sl, sl] = R[..., sl, sl]
    return out


def node_blocks(R: np.ndarray, node_sizes: Sequence[int]) -> list[np.ndarray]:
    return [R[..., sl, sl] for sl in node_slices(node_sizes)]


def assemble_block_diagonal(blocks: Sequence[np.ndarray]) -> np.ndarray:
    sizes = [b.shape[-1] for b in blocks]
    batch = blocks[0].shape[:-2]
    out = np.zeros(batch + (sum(sizes), sum(sizes)), dtype=np.result_type(*blocks))
    for b, sl in zip(blocks, node_slices(sizes)):
        out[..., sl, sl] = b
    return out


# --------------------------------------------------------------------------
# distributed quantities


def compression_matrix(Q_j: np.ndarray, cov: np.ndarray | None = None,
                       inverse: np.ndarray | None = None) -> np.ndarray:
    """``Delta_j^-1 Q_j`` from either the covariance block or its maintained inverse."""
    if inverse is not None:
        return inverse @ Q_j
    if cov is None:
        raise ValueError("need the covariance block or its inverse")
    return _spd_solve(hermitize(cov), Q_j, "node covariance block")


def constraint_block(Q_j: np.ndarray, A_j: np.ndarray) -> np.ndarray:
    """``D_j = Q_j^H Delta_j^-1 Q_j`` (S x S Hermitian)."""
    return hermitize(_ct(Q_j) @ A_j)


def compress(A_j: np.ndarray, y_j: np.ndarray) -> np.ndarray:
    """Compressed signal ``z_j = Q_j^H Delta_j^-1 y_j`` for ``y_j`` of shape ``(..., M_j)``."""
    return np.einsum("...ms,...m->...s", np.conj(A_j), y_j)


@dataclass(frozen=True)
class FusionState:
    """Network-wide sums ``D``, ``z`` and the fused vector ``z_tilde = D^-1 z``.

    In tree mode only the root holds ``D`` and ``z``; other nodes receive
    ``z_tilde`` alone.
    """

    z_tilde: np.ndarray
    D: np.ndarray | None = None
    z: np.ndarray | None = None


def solve_fused(D: np.ndarray, z: np.ndarray, pinv_fallback: bool = False) -> np.ndarray:
    try:
        np.linalg.cholesky(hermitize(D))
    except np.linalg.LinAlgError:
        if not pinv_fallback:
            raise FusionError("insufficient aggregate constraints: D is singular") from None
        warnings.warn("singular aggregate D, using pseudo-inverse", RuntimeWarning, stacklevel=3)
        log.warning("singular aggregate D; pseudo-inverse fallback")
        # rcond is relative to the largest singular value, i.e. the spectral norm
        pinv = np.linalg.pinv(D, rcond=PINV_RCOND)
        return (pinv @ z[..., None])[..., 0]
    return np.linalg.solve(D, z[..., None])[..., 0]


def dnbd_fuse(D_blocks: Sequence[np.ndarray], z_blocks: Sequence[np.ndarray],
              pinv_fallback: bool = False) -> FusionState:
    """Sum per-node constraint blocks and compressed signals (node-index order) and solve."""
    if len(D_blocks) != len(z_blocks) or not D_blocks:
        raise ValueError("need one D block and one z block per node")
    S = D_blocks[0].shape[-1]
    for D_j, z_j in zip(D_blocks, z_blocks):
        if D_j.shape[-2:] != (S, S) or z_j.shape[-1] != S:
            raise ValueError("all blocks must have dimension S")
    D = D_blocks[0].copy()
    z = z_blocks[0].copy()
    for D_j, z_j in zip(D_blocks[1:], z_blocks[1:]):
        D = D + D_j
        z = z + z_j
    return FusionState(solve_fused(D, z, pinv_fallback), D, z)


def node_output(fusion: FusionState, basis_or_gbar, j: int | None = None) -> np.ndarray:
    """Node-specific output ``gbar_j^H z_tilde``."""
    if isinstance(basis_or_gbar, ConstraintBasis):
        gbar_j = basis_or_gbar.gbar[..., j, :]
    else:
        gbar_j = np.asarray(basis_or_gbar)
    return np.sum(np.conj(gbar_j) * fusion.z_tilde, axis=-1)


def dnbd_weights(cov_blocks: Sequence[np.ndarray], basis: ConstraintBasis, j: int,
                 pinv_fallback: bool = False) -> np.ndarray:
    """Stacked effective weights ``[Delta_q^-1 Q_q]_q D^-1 gbar_j`` of the distributed beamformer.

    Used for shadow filtering; the output ``w^H y`` equals ``gbar_j^H z_tilde``.
    """
    A = [compression_matrix(basis.block(q), cov=c) for q, c in enumerate(cov_blocks)]
    D = sum(constraint_block(basis.block(q), A_q) for q, A_q in enumerate(A))
    lam = solve_fused(D, basis.gbar[..., j, :], pinv_fallback)
    return np.concatenate([A_q @ lam[..., None] for A_q in A], axis=-2)[..., 0]


def dnbd_process(Y: np.ndarray, cov_blocks: Sequence[np.ndarray], basis: ConstraintBasis,
                 pinv_fallback: bool = False) -> np.ndarray:
    """Run the distributed beamformer on a full STFT ``(L, F, M)``; returns ``(L, F, J)``.

    Covariance blocks are fixed over the horizon, so every node compresses
    its own channels, the compressed signals are summed, and ``D`` (summed
    once per bin) is solved against all frames at once.
    """
    slices = node_slices(basis.node_sizes)
    A = [compression_matrix(basis.block(q), cov=c) for q, c in enumerate(cov_blocks)]
    D = constraint_block(basis.block(0), A[0])
    for q in range(1, len(A)):
        D = D + constraint_block(basis.block(q), A[q])
    z = compress(A[0][None], Y[..., slices[0]])
    for q in range(1, len(A)):
        z = z + compress(A[q][None], Y[..., slices[q]])
    z_tilde = _solve_many(D, z, pinv_fallback)
    return np.einsum("...js,l...s->l...j", np.conj(basis.gbar), z_tilde)


def _solve_many(D: np.ndarray, z: np.ndarray, pinv_fallback: bool) -> np.ndarray:
    # D: (F, S, S), z: (L, F, S)
    rhs = np.moveaxis(z, 0, -1)  # (F, S, L)
    try:
        np.linalg.cholesky(hermitize(D))
        sol = np.linalg.solve(D, rhs)
    except np.linalg.LinAlgError:
        if not pinv_fallback:
            raise FusionError("insufficient aggregate constraints: D is singular") from None
        warnings.warn("singular aggregate D, using pseudo-inverse", RuntimeWarning, stacklevel=3)
        sol = np.linalg.pinv(D, rcond=PINV_RCOND) @ rhs
    return np.moveaxis(sol, -1, 0)
