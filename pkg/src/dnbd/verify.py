"""Self-checks comparing the distributed machinery against direct computations.

Each check returns ``(passed, detail)``. ``Quick`` runs reduced sizes in a few
seconds; ``Full`` runs the complete oracle suites plus the invariant checks.
"""

from __future__ import annotations

import enum
import io
import struct
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .beamformer import (assemble_block_diagonal, build_basis, centralized_lcmv, dnbd_process,
                         dnbd_weights, dnds_weights, lcmv_weights)
from .covariance import (RecursiveNoiseEstimator, SmoothingConfig, hermitize, is_hermitian_pd,
                         reconstruct_remote, smw_update)
from .network import (CompressedZ, ParseError, Scheme, WasnSimulator, predict_costs,
                      random_spanning_tree, read_log, write_log)
from .stft import AnalysisConfig, Window, analyze, synthesize


class Level(str, enum.Enum):
    QUICK = "quick"
    FULL = "full"


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<28} {self.detail} ({self.seconds:.1f} s)"


@dataclass
class Report:
    results: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r.passed for r in self.results)

    def text(self) -> str:
        return "\n".join(r.line() for r in self.results)


def _crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def _random_pd(rng, m):
    A = _crandn(rng, m, m)
    return A @ A.conj().T / m + 0.1 * np.eye(m)


def random_scene(rng, J=None, S=None, sizes=None):
    """Random single-bin basis with a random binary selection per node."""
    J = J or int(rng.integers(2, 7))
    S = S or int(rng.integers(1, 4))
    sizes = sizes or [int(rng.integers(2, 7)) for _ in range(J)]
    selection = (rng.random((J, S)) < 0.5).astype(float)
    selection[:, 0] = 1
    return build_basis(_crandn(rng, sum(sizes), S), sizes, selection)


def _block_diag_output(nodes, basis, y):
    """Centralized LCMV output with the block-diagonal covariance held by the nodes."""
    inv = assemble_block_diagonal([n.inverse for n in nodes])
    A = inv @ basis.Q
    G = hermitize(basis.Q.conj().T @ A)
    W = A @ np.linalg.solve(G, basis.gbar.T)
    return W.conj().T @ y


def check_distributed_optimality(n_scenes=50, n_frames=150, n_bins=2, seed=0):
    """Per frame and bin: simulated DNBD output vs centralized block-diagonal LCMV."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_scenes):
        for b in range(n_bins):
            basis = random_scene(rng)
            M = sum(basis.node_sizes)
            inits = [np.linalg.inv(_random_pd(rng, m)) for m in basis.node_sizes]
            sim = WasnSimulator(basis, Scheme.DNBD, SmoothingConfig(alpha=0.9), bin_index=b,
                                initial_inverses=inits)
            vad = rng.random((n_frames, basis.n_nodes)) < 0.3
            Y = _crandn(rng, n_frames, M)
            for l in range(n_frames):
                res = sim.run_frame(Y[l], vad[l], l)
                ref = _block_diag_output(sim.nodes, basis, Y[l])
                err = np.abs(res.outputs - ref) / np.maximum(1.0, np.abs(ref))
                worst = max(worst, float(err.max()))
    ok = worst <= 1e-10
    return ok, f"{n_scenes} scenes x {n_bins} bins, max scaled error {worst:.2e}"


def check_smw_chain(n_frames=1000, M=6, S=2, alpha=0.95, seed=1):
    """Chained rank-one inverse against direct inversion of the recursive average."""
    rng = np.random.default_rng(seed)
    R = _random_pd(rng, M)
    inv = np.linalg.inv(R)
    Q = _crandn(rng, M, S)
    D = hermitize(Q.conj().T @ inv @ Q)
    drift = remote = 0.0
    pd = True
    for _ in range(n_frames):
        y = _crandn(rng, M)
        R = alpha * R + (1 - alpha) * np.outer(y, y.conj())
        inv_next, payload, _ = smw_update(inv, y, alpha, Q)
        D_rem, z_rem = reconstruct_remote(D, payload, alpha)
        D_loc = hermitize(Q.conj().T @ inv_next @ Q)
        z_loc = Q.conj().T @ inv_next @ y
        remote = max(remote, np.max(np.abs(D_rem - D_loc)) / np.max(np.abs(D_loc)),
                     np.max(np.abs(z_rem - z_loc)) / max(1.0, np.max(np.abs(z_loc))))
        inv, D = inv_next, D_loc
        pd = pd and is_hermitian_pd(inv)
    direct = np.linalg.inv(R)
    drift = float(np.linalg.norm(inv - direct) / np.linalg.norm(direct))
    ok = drift < 1e-6 and remote <= 1e-10 and pd
    return ok, f"{n_frames} frames, drift {drift:.2e}, remote {remote:.2e}, PD kept {pd}"


def check_remote_reconstruction(n_frames=300, seed=2):
    """Simulator-level: every rank-one reconstruction matches the owner's local (D_j, z_j)."""
    rng = np.random.default_rng(seed)
    basis = random_scene(rng, J=4, S=2, sizes=[4, 5, 3, 6])
    sim = WasnSimulator(basis, Scheme.DNBD, SmoothingConfig(alpha=0.95), check_remote=True, warmup=10)
    sim.run(_crandn(rng, n_frames, sum(basis.node_sizes)), rng.random((n_frames, 4)) < 0.3)
    return sim.max_remote_error <= 1e-10, f"max deviation {sim.max_remote_error:.2e}"


def check_topology_independence(n_trees=20, J=8, n_frames=60, seed=3):
    """Fused vectors on random spanning trees equal the fully connected ones."""
    rng = np.random.default_rng(seed)
    basis = random_scene(rng, J=J, S=2, sizes=[int(v) for v in rng.integers(2, 6, J)])
    inits = [np.linalg.inv(_random_pd(rng, m)) for m in basis.node_sizes]
    Y = _crandn(rng, n_frames, sum(basis.node_sizes))
    vad = rng.random((n_frames, J)) < 0.3
    ref = WasnSimulator(basis, Scheme.DNBD, SmoothingConfig(alpha=0.9), initial_inverses=inits)
    ref_z = [ref.run_frame(Y[l], vad[l], l).fusion[0].z_tilde for l in range(n_frames)]
    worst = 0.0
    for _ in range(n_trees):
        topo = random_spanning_tree(J, rng, root=int(rng.integers(J)))
        sim = WasnSimulator(basis, Scheme.DNBD, SmoothingConfig(alpha=0.9), topology=topo,
                            initial_inverses=inits)
        for l in range(n_frames):
            fus = sim.run_frame(Y[l], vad[l], l).fusion
            for f in fus:
                worst = max(worst, float(np.max(np.abs(f.z_tilde - ref_z[l]))
                                         / max(1.0, np.max(np.abs(ref_z[l])))))
    return worst <= 1e-12, f"{n_trees} trees of {J} nodes, max deviation {worst:.2e}"


def ledger_reals(J, N, S, scheme, mode, n_frames=6, seed=0):
    """Transmitted reals per frame of a short all-noise run (first frame is a start-up)."""
    rng = np.random.default_rng(seed)
    basis = random_scene(rng, J=J, S=S, sizes=[N] * J)
    inits = [np.linalg.inv(_random_pd(rng, N)) for _ in range(J)]
    smoothing = SmoothingConfig(mode=mode, block_frames=n_frames, alpha=0.9)
    sim = WasnSimulator(basis, scheme, smoothing, initial_inverses=inits)
    sim.run(_crandn(rng, n_frames, J * N), np.zeros((n_frames, J), dtype=bool))
    return [sim.ledger.reals(frame=l) for l in range(n_frames)]


def check_ledger_costs(J_range=range(2, 9), S_range=range(1, 5), N=6):
    """Steady-state ledger counts equal the analytic bandwidth rows."""
    bad = []
    for J in J_range:
        for S in S_range:
            rows = {(r.beamformer, r.smoothing): r.bandwidth_value for r in predict_costs(J, N, S)}
            expect = {
                (Scheme.CENTRALIZED, "recursive"): rows[("LCMV/LCMP", "recursive")],
                (Scheme.CENTRALIZED, "nonrecursive"): rows[("LCMV/LCMP", "nonrecursive")],
                (Scheme.DNBD, "recursive"): rows[("DNBD-LCMV/DNBD-LCMP", "recursive")],
                (Scheme.DNBD, "nonrecursive"): rows[("DNBD-LCMV/DNBD-LCMP", "nonrecursive")],
                (Scheme.DNDS, "nonrecursive"): rows[("DNDS", "none")],
            }
            for (scheme, mode), want in expect.items():
                got = ledger_reals(J, N, S, scheme, mode)[1:]
                if any(g != want for g in got):
                    bad.append(f"J={J} S={S} {scheme.value}/{mode}: {got[0]} != {want}")
    n = len(J_range) * len(S_range)
    return not bad, f"{n} (J, S) pairs" + (f"; mismatches: {bad[:3]}" if bad else ", exact")


def check_corrupted_tag():
    buf = io.BytesIO()
    write_log([CompressedZ(0, 1, 0, 0, np.array([1 + 2j, 3 - 1j]))] * 2, buf)
    data = bytearray(buf.getvalue())
    second = 4 + struct.unpack_from("<I", data, 0)[0]
    struct.pack_into("<I", data, second + 4, 99)
    try:
        read_log(bytes(data))
    except ParseError as exc:
        ok = exc.offset == second + 4 and "tag" in exc.reason
        return ok, f"raised at byte {exc.offset}: {exc.reason}"
    return False, "corrupted tag was accepted"


def check_stft_round_trip(seed=4):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n, hop, win in [(512, 256, Window.HANN), (256, 64, Window.HANN), (128, 128, Window.RECT)]:
        cfg = AnalysisConfig(frame_length=n, hop_length=hop, window=win)
        x = rng.standard_normal((n * 20, 2))
        y = synthesize(analyze(x, cfg), cfg, length=len(x))
        sl = slice(n, -n)
        worst = max(worst, float(np.linalg.norm(y[sl] - x[sl]) / np.linalg.norm(x[sl])))
    return worst < 1e-10, f"max relative error {worst:.2e}"


def check_beamformer_invariants(n=30, seed=5):
    """Constraint satisfaction, basis-scaling invariance and the identity reduction."""
    rng = np.random.default_rng(seed)
    cons = scale = ident = 0.0
    for _ in range(n):
        basis = random_scene(rng)
        J, M = basis.n_nodes, sum(basis.node_sizes)
        blocks = [_random_pd(rng, m) for m in basis.node_sizes]
        R = assemble_block_diagonal(blocks)
        sigma = _crandn(rng, basis.n_sources)
        scaled = basis.scaled(sigma)
        y = _crandn(rng, 20, M)
        for j in range(J):
            w = centralized_lcmv(R, basis, j)
            cons = max(cons, float(np.max(np.abs(basis.Q.conj().T @ w - basis.gbar[j]))))
            w_dist = dnbd_weights(blocks, basis, j)
            w_scaled = dnbd_weights(blocks, scaled, j)
            scale = max(scale, float(np.max(np.abs(y @ w_dist.conj() - y @ w_scaled.conj()))
                                     / max(1.0, np.max(np.abs(y @ w_dist.conj())))))
            w_eye = lcmv_weights(np.eye(M), basis.Q, basis.gbar[j])
            w_bd = dnbd_weights([np.eye(m) for m in basis.node_sizes], basis, j)
            ident = max(ident, float(np.max(np.abs(w_eye - dnds_weights(basis, j)))),
                        float(np.max(np.abs(w_bd - dnds_weights(basis, j)))))
        out = dnbd_process(y[:, None, :], blocks, build_basis(basis.Q[None], basis.node_sizes,
                                                              basis.selection))
        ref = np.stack([y @ centralized_lcmv(R, basis, j).conj() for j in range(J)], axis=-1)
        cons = max(cons, float(np.max(np.abs(out[:, 0] - ref)) / max(1.0, np.max(np.abs(ref)))))
    ok = max(cons, scale, ident) < 1e-9
    return ok, f"constraint {cons:.1e}, scaling {scale:.1e}, identity {ident:.1e}"


def check_estimator_pd(n_frames=500, seed=6):
    """The recursive estimator keeps a Hermitian positive definite inverse through speech gaps."""
    rng = np.random.default_rng(seed)
    est = RecursiveNoiseEstimator(5, 0.9)
    ok = True
    for _ in range(n_frames):
        est.step(_crandn(rng, 5), bool(rng.random() < 0.4))
        ok = ok and is_hermitian_pd(est.inverse)
    return ok, f"{n_frames} frames, {est.reseeds} seeding(s)"


def _checks(level: Level) -> list[tuple[str, Callable]]:
    full = level is Level.FULL
    checks = [
        ("distributed optimality", lambda: check_distributed_optimality(50 if full else 8,
                                                                        150 if full else 60)),
        ("SMW chain", check_smw_chain),
        ("remote reconstruction", check_remote_reconstruction),
        ("topology independence", lambda: check_topology_independence(20 if full else 5)),
        ("ledger vs cost table", lambda: check_ledger_costs() if full
         else check_ledger_costs(range(2, 5), range(1, 3))),
        ("corrupted message tag", check_corrupted_tag),
    ]
    if full:
        checks += [
            ("STFT round trip", check_stft_round_trip),
            ("beamformer invariants", check_beamformer_invariants),
            ("Hermitian/PD preservation", check_estimator_pd),
        ]
    return checks


def verify(level: Level | str = Level.QUICK, echo: Callable[[str], None] | None = None) -> Report:
    report = Report()
    for name, fn in _checks(Level(level)):
        t0 = time.perf_counter()
        try:
            passed, detail = fn()
        except Exception as exc:  # a crashing check is a failed check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        report.results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - t0))
        if echo:
            echo(report.results[-1].line())
    return report
