"""Per-node covariance blocks and their inverses.

Block estimates operate on arrays shaped ``(n_frames, ..., M_j)`` and return
``(..., M_j, M_j)``, so a whole STFT (frames, bins, channels) is handled in
one call. The recursive machinery (:func:`smw_update`,
:func:`reconstruct_remote`, :class:`RecursiveNoiseEstimator`) works on a
single frequency bin.
"""

from __future__ import annotations

import enum
import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np

DEFAULT_LOADING = 1e-6
WARMUP_FRAMES = 10
INIT_POWER_FRACTION = 1e-3


class RankDeficiencyWarning(UserWarning):
    pass


class PDViolation(ArithmeticError):
    """The recursive inverse lost positive definiteness and must be re-initialised."""


class SmoothingMode(str, enum.Enum):
    NONRECURSIVE = "nonrecursive"
    RECURSIVE = "recursive"


@dataclass(frozen=True)
class SmoothingConfig:
    mode: SmoothingMode = SmoothingMode.RECURSIVE
    block_frames: int = 100
    alpha: float = 0.95
    loading: float = DEFAULT_LOADING

    def __post_init__(self):
        object.__setattr__(self, "mode", SmoothingMode(self.mode))
        if self.mode is SmoothingMode.RECURSIVE and not 0 < self.alpha < 1:
            raise ValueError("forgetting factor must lie in (0, 1)")
        if self.mode is SmoothingMode.NONRECURSIVE and self.block_frames < 1:
            raise ValueError("block length must be >= 1")
        if self.loading < 0:
            raise ValueError("diagonal loading must be >= 0")


@dataclass(frozen=True)
class RankOnePayload:
    """What a node broadcasts on a noise-only frame: ``c_bar`` (S complex) and ``c`` (real)."""

    c_bar: np.ndarray
    c: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.c_bar)) or not np.isfinite(self.c):
            raise ValueError("non-finite rank-one payload")
        if self.c < 0:
            raise PDViolation("PD violated, re-initialize (negative quadratic form in payload)")


def hermitize(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + np.conj(np.swapaxes(A, -1, -2)))


def load_diagonal(A: np.ndarray, loading: float = DEFAULT_LOADING) -> np.ndarray:
    """Add ``loading * trace/M`` to the diagonal (relative diagonal loading)."""
    m = A.shape[-1]
    eps = loading * np.real(np.trace(A, axis1=-2, axis2=-1)) / m
    return A + eps[..., None, None] * np.eye(m)


def is_hermitian_pd(A: np.ndarray, tol: float = 1e-12) -> bool:
    A = np.asarray(A)
    scale = max(np.max(np.abs(A)), np.finfo(float).tiny)
    if np.max(np.abs(A - np.conj(np.swapaxes(A, -1, -2)))) > tol * scale:
        return False
    return bool(np.all(np.linalg.eigvalsh(hermitize(A)) > 0))


def _outer_mean(frames: np.ndarray) -> np.ndarray:
    # frames (L, ..., M) -> (..., M, L) @ (..., L, M), a batched matmul
    X = np.moveaxis(frames, 0, -1)
    return (X @ np.conj(np.swapaxes(X, -1, -2))) / frames.shape[0]


def _check_rank(R: np.ndarray, n_frames: int) -> None:
    m = R.shape[-1]
    if n_frames < m:
        warnings.warn(
            f"{n_frames} frames for a {m}x{m} block: estimate is rank deficient, "
            "diagonal loading is required",
            RankDeficiencyWarning,
            stacklevel=3,
        )


def estimate_block_nonrecursive(frames, loading: float = DEFAULT_LOADING) -> np.ndarray:
    """Moving-average estimate ``mean(y y^H)`` over noise-only frames, plus loading.

    ``frames`` has shape ``(n_frames, ..., M_j)``.
    """
    frames = np.asarray(frames)
    if frames.shape[0] == 0:
        raise ValueError("no noise frames in block")
    R = hermitize(_outer_mean(frames))
    if loading == 0:
        _check_rank(R, frames.shape[0])
        return R
    return load_diagonal(R, loading)


def estimate_noisy_block(noisy, loading: float = DEFAULT_LOADING) -> np.ndarray:
    """Noisy covariance over the whole horizon (the LCMP statistic)."""
    return estimate_block_nonrecursive(noisy, loading)


def estimate_block_entire_horizon(noisy, noise, contaminated=(), frames=None,
                                  loading: float = DEFAULT_LOADING) -> np.ndarray:
    """Noise covariance over the whole horizon with simulated VAD errors.

    Frames listed in ``contaminated`` contribute the noisy observation
    instead of the true noise; every other frame of ``frames`` (default: all)
    contributes its noise component. The normaliser is the number of frames.
    """
    noisy = np.asarray(noisy)
    noise = np.asarray(noise)
    if noisy.shape != noise.shape:
        raise ValueError("noisy and noise spectra must have the same shape")
    all_frames = np.arange(noisy.shape[0]) if frames is None else np.asarray(frames, dtype=int)
    contaminated = np.asarray(contaminated, dtype=int)
    if not set(contaminated.tolist()) <= set(all_frames.tolist()):
        raise ValueError("contaminated frames must be a subset of the frame set")
    if len(all_frames) == 0:
        raise ValueError("no noise frames in block")
    mask = np.isin(all_frames, contaminated)
    mixed = np.where(mask.reshape((-1,) + (1,) * (noisy.ndim - 1)), noisy[all_frames], noise[all_frames])
    return estimate_block_nonrecursive(mixed, loading)


def smw_update(inv_prev: np.ndarray, y: np.ndarray, alpha: float, Q_j: np.ndarray | None = None):
    """One rank-one update of the inverse noise covariance.

    Returns ``(inv_next, payload, c_tilde)`` where ``inv_next`` is the inverse
    of ``alpha * Delta_prev + (1 - alpha) * y y^H``. ``payload`` carries
    ``c_bar = Q_j^H c_tilde`` and ``c = y^H inv_prev y``; it is ``None`` when no
    basis block is supplied.
    """
    if not 0 < alpha < 1:
        raise ValueError("forgetting factor must lie in (0, 1)")
    if not (np.all(np.isfinite(inv_prev)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite input to rank-one update")
    c_tilde = inv_prev @ y
    c = float(np.real(np.vdot(y, c_tilde)))
    if c < 0:
        raise PDViolation("PD violated, re-initialize")
    denom = alpha / (1 - alpha) + c
    inv_next = hermitize(inv_prev - np.outer(c_tilde, np.conj(c_tilde)) / denom) / alpha
    payload = None if Q_j is None else RankOnePayload(np.conj(Q_j.T) @ c_tilde, c)
    return inv_next, payload, c_tilde


def reconstruct_remote(D_prev: np.ndarray, payload: RankOnePayload, alpha: float):
    """Rebuild a remote node's ``(D_j, z_j)`` from its rank-one payload."""
    c_bar = np.asarray(payload.c_bar)
    if D_prev.shape != (c_bar.shape[0], c_bar.shape[0]):
        raise ValueError(f"payload of size {c_bar.shape[0]} does not match D of shape {D_prev.shape}")
    if not 0 < alpha < 1:
        raise ValueError("forgetting factor must lie in (0, 1)")
    denom = alpha / (1 - alpha) + payload.c
    D_next = hermitize(D_prev - np.outer(c_bar, np.conj(c_bar)) / denom) / alpha
    z = c_bar / alpha * (1 - payload.c / denom)
    return D_next, z


class EstimatorEvent(str, enum.Enum):
    FROZEN = "frozen"        # inverse unchanged
    RANK_ONE = "rank_one"    # inverse changed by a rank-one update
    RESEED = "reseed"        # inverse replaced outright


@dataclass
class EstimatorStep:
    event: EstimatorEvent
    payload: RankOnePayload | None = None
    c_tilde: np.ndarray | None = None


class RecursiveNoiseEstimator:
    """First-order recursive inverse noise covariance of one node and one bin.

    Until ``warmup`` noise frames have been seen the inverse is
    ``I / (1e-3 * mean input power)``; the buffered frames then seed a
    moving-average estimate, after which every noise-only frame is folded in
    with :func:`smw_update`. Speech frames leave the state untouched. A
    positive-definiteness failure re-seeds from the last ``warmup`` noise
    frames.
    """

    def __init__(self, n_mics: int, alpha: float, Q_j: np.ndarray | None = None,
                 warmup: int = WARMUP_FRAMES, loading: float = DEFAULT_LOADING,
                 initial_inverse: np.ndarray | None = None):
        if not 0 < alpha < 1:
            raise ValueError("forgetting factor must lie in (0, 1)")
        self.n_mics = n_mics
        self.alpha = alpha
        self.Q_j = Q_j
        self.warmup = warmup
        self.loading = loading
        self.buffer: deque = deque(maxlen=max(warmup, 1))
        self.inverse = None if initial_inverse is None else np.array(initial_inverse, dtype=complex)
        self.seeded = initial_inverse is not None
        self.reseeds = 0

    def _reseed(self) -> None:
        R = estimate_block_nonrecursive(np.array(self.buffer), self.loading or DEFAULT_LOADING)
        self.inverse = hermitize(np.linalg.inv(R))
        self.seeded = True
        self.reseeds += 1

    def step(self, y: np.ndarray, speech: bool) -> EstimatorStep:
        y = np.asarray(y, dtype=complex)
        if self.inverse is None:
            power = float(np.mean(np.abs(y) ** 2))
            eps0 = INIT_POWER_FRACTION * (power if power > 0 else 1.0)
            self.inverse = np.eye(self.n_mics, dtype=complex) / eps0
            first = EstimatorStep(EstimatorEvent.RESEED)
        else:
            first = None
        if speech:
            return first or EstimatorStep(EstimatorEvent.FROZEN)
        self.buffer.append(y)
        if not self.seeded:
            if len(self.buffer) >= self.warmup:
                self._reseed()
                return EstimatorStep(EstimatorEvent.RESEED)
            return first or EstimatorStep(EstimatorEvent.FROZEN)
        try:
            inv, payload, c_tilde = smw_update(self.inverse, y, self.alpha, self.Q_j)
        except PDViolation:
            self._reseed()
            return EstimatorStep(EstimatorEvent.RESEED)
        self.inverse = inv
        if first is not None:
            return first
        return EstimatorStep(EstimatorEvent.RANK_ONE, payload, c_tilde)
