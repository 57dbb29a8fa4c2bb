"""WASN message layer: wire format, transmission ledger, topologies and the
per-bin protocol simulator.

One real number on the wire counts as one transmission. Broadcasts in a
fully connected network are counted once, not once per receiver.

Wire format (little-endian). Header: seven ``u32`` fields
``tag, sender, receiver, frame, bin, dim, flags``. Payload: ``f64`` values,
complex vectors interleaved ``re, im``, Hermitian ``S x S`` matrices packed
as the ``S`` real diagonal entries followed by the strictly lower triangle
(row-major, ``re, im``), i.e. ``S**2`` reals. ``dim`` is ``S`` (or ``M_j``
for raw signals); bit 0 of ``flags`` marks a partial sum carrying ``D``.
Message logs are sequences of ``u32 length`` + message records.
"""

from __future__ import annotations

import enum
import itertools
import struct
from collections import Counter, defaultdict, deque
from dataclasses import dataclass, field
from typing import BinaryIO, ClassVar, Iterable

import networkx as nx
import numpy as np

from .beamformer import (ConstraintBasis, FusionState, compress, compression_matrix,
                         constraint_block, solve_fused)
from .covariance import (EstimatorEvent, RankOnePayload, RecursiveNoiseEstimator,
                         SmoothingConfig, SmoothingMode, estimate_block_nonrecursive,
                         hermitize, reconstruct_remote)
from .stft import node_slices

BROADCAST = 0xFFFFFFFF
HEADER = struct.Struct("<7I")
FLAG_HAS_D = 1


class ParseError(ValueError):
    def __init__(self, offset: int, reason: str):
        super().__init__(f"parse error at byte {offset}: {reason}")
        self.offset = offset
        self.reason = reason


class IncompleteFusionError(RuntimeError):
    pass


class Tag(enum.IntEnum):
    COMPRESSED_Z = 1
    CONSTRAINT_D = 2
    RANK_ONE = 3
    PARTIAL_SUM = 4
    FUSED_Z = 5
    RAW_SIGNAL = 6


# --------------------------------------------------------------------------
# messages


@dataclass(frozen=True, eq=False)
class WasnMessage:
    sender: int
    receiver: int
    frame: int
    bin: int
    tag: ClassVar[Tag]

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def real_count(self) -> int:
        raise NotImplementedError

    def _payload(self) -> list[np.ndarray]:
        raise NotImplementedError

    @property
    def flags(self) -> int:
        return 0


@dataclass(frozen=True, eq=False)
class CompressedZ(WasnMessage):
    z: np.ndarray
    tag: ClassVar[Tag] = Tag.COMPRESSED_Z

    @property
    def dim(self):
        return len(self.z)

    def real_count(self):
        return 2 * self.dim

    def _payload(self):
        return [_pack_complex(self.z)]


@dataclass(frozen=True, eq=False)
class ConstraintD(WasnMessage):
    D: np.ndarray
    tag: ClassVar[Tag] = Tag.CONSTRAINT_D

    @property
    def dim(self):
        return self.D.shape[0]

    def real_count(self):
        return self.dim ** 2

    def _payload(self):
        return [pack_hermitian(self.D)]


@dataclass(frozen=True, eq=False)
class RankOne(WasnMessage):
    c_bar: np.ndarray
    c: float
    tag: ClassVar[Tag] = Tag.RANK_ONE

    @property
    def dim(self):
        return len(self.c_bar)

    def real_count(self):
        return 2 * self.dim + 1

    def _payload(self):
        return [_pack_complex(self.c_bar), np.array([self.c])]

    @property
    def payload(self) -> RankOnePayload:
        return RankOnePayload(self.c_bar, self.c)


@dataclass(frozen=True, eq=False)
class PartialSum(WasnMessage):
    z: np.ndarray
    D: np.ndarray | None = None
    tag: ClassVar[Tag] = Tag.PARTIAL_SUM

    @property
    def dim(self):
        return len(self.z)

    @property
    def flags(self):
        return FLAG_HAS_D if self.D is not None else 0

    def real_count(self):
        return 2 * self.dim + (self.dim ** 2 if self.D is not None else 0)

    def _payload(self):
        out = [_pack_complex(self.z)]
        if self.D is not None:
            out.append(pack_hermitian(self.D))
        return out


@dataclass(frozen=True, eq=False)
class FusedZ(WasnMessage):
    z_tilde: np.ndarray
    tag: ClassVar[Tag] = Tag.FUSED_Z

    @property
    def dim(self):
        return len(self.z_tilde)

    def real_count(self):
        return 2 * self.dim

    def _payload(self):
        return [_pack_complex(self.z_tilde)]


@dataclass(frozen=True, eq=False)
class RawSignal(WasnMessage):
    """Raw microphone observations (centralized baseline only)."""

    y: np.ndarray
    tag: ClassVar[Tag] = Tag.RAW_SIGNAL

    @property
    def dim(self):
        return len(self.y)

    def real_count(self):
        return 2 * self.dim

    def _payload(self):
        return [_pack_complex(self.y)]


def _pack_complex(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=complex)
    out = np.empty(2 * len(v))
    out[0::2] = v.real
    out[1::2] = v.imag
    return out


def _unpack_complex(x: np.ndarray) -> np.ndarray:
    return x[0::2] + 1j * x[1::2]


def pack_hermitian(D: np.ndarray) -> np.ndarray:
    """``S**2`` reals: real diagonal, then the strictly lower triangle as ``re, im`` pairs."""
    S = D.shape[0]
    rows, cols = np.tril_indices(S, -1)
    return np.concatenate([np.real(np.diag(D)), _pack_complex(D[rows, cols])])


def unpack_hermitian(x: np.ndarray, S: int) -> np.ndarray:
    D = np.zeros((S, S), dtype=complex)
    D[np.diag_indices(S)] = x[:S]
    rows, cols = np.tril_indices(S, -1)
    low = _unpack_complex(x[S:])
    D[rows, cols] = low
    D[cols, rows] = np.conj(low)
    return D


def serialize_message(msg: WasnMessage) -> bytes:
    payload = np.concatenate(msg._payload()).astype("<f8")
    head = HEADER.pack(int(msg.tag), msg.sender, msg.receiver, msg.frame, msg.bin, msg.dim, msg.flags)
    return head + payload.tobytes()


def _payload_len(tag: Tag, dim: int, flags: int) -> int:
    if tag is Tag.CONSTRAINT_D:
        return dim * dim
    if tag is Tag.RANK_ONE:
        return 2 * dim + 1
    if tag is Tag.PARTIAL_SUM:
        return 2 * dim + (dim * dim if flags & FLAG_HAS_D else 0)
    return 2 * dim


def deserialize_message(buf: bytes, offset: int = 0) -> WasnMessage:
    """Inverse of :func:`serialize_message`; ``offset`` only shifts reported error positions."""
    if len(buf) < HEADER.size:
        raise ParseError(offset + len(buf), f"truncated header ({len(buf)} of {HEADER.size} bytes)")
    tag_raw, sender, receiver, frame, bin_, dim, flags = HEADER.unpack_from(buf)
    try:
        tag = Tag(tag_raw)
    except ValueError:
        raise ParseError(offset, f"bad message tag {tag_raw}") from None
    if flags & ~FLAG_HAS_D or (flags and tag is not Tag.PARTIAL_SUM):
        raise ParseError(offset + 24, f"bad flags {flags:#x} for {tag.name}")
    n = _payload_len(tag, dim, flags)
    need = HEADER.size + 8 * n
    if len(buf) != need:
        where = offset + min(len(buf), need)
        raise ParseError(where, f"{tag.name} with dim {dim} needs {need} bytes, got {len(buf)}")
    x = np.frombuffer(buf, dtype="<f8", offset=HEADER.size).astype(float)
    head = dict(sender=sender, receiver=receiver, frame=frame, bin=bin_)
    if tag is Tag.COMPRESSED_Z:
        return CompressedZ(**head, z=_unpack_complex(x))
    if tag is Tag.CONSTRAINT_D:
        return ConstraintD(**head, D=unpack_hermitian(x, dim))
    if tag is Tag.RANK_ONE:
        return RankOne(**head, c_bar=_unpack_complex(x[:-1]), c=float(x[-1]))
    if tag is Tag.PARTIAL_SUM:
        D = unpack_hermitian(x[2 * dim:], dim) if flags & FLAG_HAS_D else None
        return PartialSum(**head, z=_unpack_complex(x[:2 * dim]), D=D)
    if tag is Tag.FUSED_Z:
        return FusedZ(**head, z_tilde=_unpack_complex(x))
    return RawSignal(**head, y=_unpack_complex(x))


def write_log(messages: Iterable[WasnMessage], fh: BinaryIO) -> None:
    for msg in messages:
        rec = serialize_message(msg)
        fh.write(struct.pack("<I", len(rec)))
        fh.write(rec)


def read_log(data: bytes) -> list[WasnMessage]:
    out, pos = [], 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise ParseError(pos, "truncated record length")
        (n,) = struct.unpack_from("<I", data, pos)
        start = pos + 4
        if start + n > len(data):
            raise ParseError(start, f"record of {n} bytes runs past end of log")
        out.append(deserialize_message(data[start:start + n], offset=start))
        pos = start + n
    return out


# --------------------------------------------------------------------------
# ledger


class TransmissionLedger:
    """Per-node, per-frame counts of transmitted reals, rebuilt from the message log."""

    def __init__(self):
        self.log: list[WasnMessage] = []
        self._reals: dict[tuple[int, int], int] = defaultdict(int)
        self._types: dict[int, Counter] = defaultdict(Counter)

    def record(self, msg: WasnMessage) -> None:
        self.log.append(msg)
        self._reals[(msg.sender, msg.frame)] += msg.real_count()
        self._types[msg.frame][type(msg).__name__] += 1

    @classmethod
    def replay(cls, log: Iterable[WasnMessage]) -> "TransmissionLedger":
        led = cls()
        for msg in log:
            led.record(msg)
        return led

    def reals(self, frame: int | None = None, node: int | None = None) -> int:
        return sum(v for (n, f), v in self._reals.items()
                   if (frame is None or f == frame) and (node is None or n == node))

    def message_counts(self, frame: int | None = None) -> Counter:
        if frame is not None:
            return Counter(self._types.get(frame, {}))
        total = Counter()
        for c in self._types.values():
            total.update(c)
        return total

    def frames(self) -> list[int]:
        return sorted(self._types)

    def dump(self, fh: BinaryIO) -> None:
        write_log(self.log, fh)


# --------------------------------------------------------------------------
# topologies


class TopologyKind(str, enum.Enum):
    FULLY_CONNECTED = "fully_connected"
    TREE = "tree"


@dataclass(frozen=True)
class Topology:
    n_nodes: int
    edges: frozenset
    kind: TopologyKind
    root: int | None = None

    def __post_init__(self):
        edges = frozenset(tuple(sorted((int(a), int(b)))) for a, b in self.edges)
        object.__setattr__(self, "edges", edges)
        g = self.graph()
        if self.n_nodes < 1:
            raise ValueError("need at least one node")
        if any(a == b or not (0 <= a < self.n_nodes and 0 <= b < self.n_nodes) for a, b in edges):
            raise ValueError("edge endpoints must be distinct node indices")
        if not nx.is_connected(g):
            raise ValueError("topology is disconnected")
        if self.kind is TopologyKind.TREE:
            if not nx.is_tree(g):
                raise ValueError("cycle detected: a tree needs exactly J-1 edges and no cycles")
            if self.root is None:
                object.__setattr__(self, "root", 0)
            if not 0 <= self.root < self.n_nodes:
                raise ValueError("root out of range")
        elif len(edges) != self.n_nodes * (self.n_nodes - 1) // 2:
            raise ValueError("fully connected topology needs J(J-1)/2 edges")

    def graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.n_nodes))
        g.add_edges_from(self.edges)
        return g

    def neighbors(self, j: int) -> list[int]:
        return sorted(q for e in self.edges for q in e if j in e and q != j)

    def parents(self) -> dict[int, int | None]:
        """Next hop towards the root for every node (``None`` for the root)."""
        if self.kind is not TopologyKind.TREE:
            raise ValueError("parents are only defined for trees")
        parent = {self.root: None}
        order = deque([self.root])
        while order:
            j = order.popleft()
            for q in self.neighbors(j):
                if q not in parent:
                    parent[q] = j
                    order.append(q)
        return parent

    def children(self) -> dict[int, list[int]]:
        parent = self.parents()
        kids = {j: [] for j in range(self.n_nodes)}
        for q, p in parent.items():
            if p is not None:
                kids[p].append(q)
        return {j: sorted(v) for j, v in kids.items()}


def fully_connected(n_nodes: int) -> Topology:
    return Topology(n_nodes, frozenset(itertools.combinations(range(n_nodes), 2)),
                    TopologyKind.FULLY_CONNECTED)


def tree_topology(n_nodes: int, edges, root: int | None = None) -> Topology:
    return Topology(n_nodes, frozenset(edges), TopologyKind.TREE, 0 if root is None else root)


def random_spanning_tree(n_nodes: int, rng, root: int | None = None) -> Topology:
    """Uniformly random labelled tree (random Pruefer sequence)."""
    if n_nodes <= 2:
        return tree_topology(n_nodes, [(0, 1)] if n_nodes == 2 else [], root)
    seq = [int(v) for v in rng.integers(0, n_nodes, size=n_nodes - 2)]
    g = nx.from_prufer_sequence(seq)
    return tree_topology(n_nodes, g.edges(), root)


# --------------------------------------------------------------------------
# protocol simulation


class Scheme(str, enum.Enum):
    DNBD = "dnbd"
    DNDS = "dnds"
    CENTRALIZED = "centralized"


@dataclass
class FrameResult:
    fusion: list[FusionState | None]
    outputs: np.ndarray
    fire_order: list[int] = field(default_factory=list)


@dataclass
class _LocalStep:
    z: np.ndarray
    D: np.ndarray
    d_changed: bool
    rank_one: RankOnePayload | None = None


class SensorNode:
    """State held by one node for one frequency bin."""

    def __init__(self, index: int, Q_j: np.ndarray, gbar_j: np.ndarray, scheme: Scheme,
                 smoothing: SmoothingConfig | None, initial_inverse=None, warmup: int | None = None):
        self.index = index
        self.Q_j = Q_j
        self.gbar_j = gbar_j
        self.scheme = scheme
        self.smoothing = smoothing
        m = Q_j.shape[0]
        self.inverse = None
        self.estimator = None
        if scheme is Scheme.DNDS:
            self.inverse = np.eye(m, dtype=complex)
        elif smoothing.mode is SmoothingMode.RECURSIVE:
            kw = {} if warmup is None else {"warmup": warmup}
            self.estimator = RecursiveNoiseEstimator(m, smoothing.alpha, Q_j, loading=smoothing.loading,
                                                     initial_inverse=initial_inverse, **kw)
        elif initial_inverse is not None:
            self.inverse = np.array(initial_inverse, dtype=complex)
        self._block_changed = True
        self.announced = False
        self.D = None

    def begin_block(self, y_block: np.ndarray, speech: np.ndarray) -> None:
        """Moving-average estimate from the noise-only frames of a new block."""
        noise = y_block[~np.asarray(speech, dtype=bool)]
        if len(noise):
            R = estimate_block_nonrecursive(noise, self.smoothing.loading)
            self.inverse = hermitize(np.linalg.inv(R))
        elif self.inverse is None:
            power = float(np.mean(np.abs(y_block) ** 2)) or 1.0
            self.inverse = np.eye(self.Q_j.shape[0], dtype=complex) / (1e-3 * power)
        self._block_changed = True

    def local_step(self, y_j: np.ndarray, speech: bool) -> _LocalStep:
        rank_one = None
        if self.estimator is not None:
            step = self.estimator.step(y_j, speech)
            self.inverse = self.estimator.inverse
            changed = step.event is not EstimatorEvent.FROZEN
            if step.event is EstimatorEvent.RANK_ONE:
                rank_one = step.payload
        else:
            if self.inverse is None:
                raise RuntimeError(f"node {self.index}: no covariance estimate (call begin_block)")
            changed = self._block_changed
            self._block_changed = False
        A = compression_matrix(self.Q_j, inverse=self.inverse)
        if changed or self.D is None:
            self.D = constraint_block(self.Q_j, A)
        z = compress(A, y_j)
        if not self.announced:
            rank_one, changed = None, True
            self.announced = True
        return _LocalStep(z, self.D, changed, rank_one)


class WasnSimulator:
    """Deterministic per-bin simulation of the distributed beamformer.

    ``basis`` is a single-bin :class:`ConstraintBasis` (``Q`` of shape
    ``(M, S)``). Every transmitted message goes through the ledger. With
    ``check_remote`` the simulator compares every rank-one reconstruction
    against the owner's local ``(D_j, z_j)`` and keeps the largest deviation
    in ``max_remote_error``.
    """

    def __init__(self, basis: ConstraintBasis, scheme: Scheme = Scheme.DNBD,
                 smoothing: SmoothingConfig | None = None, topology: Topology | None = None,
                 bin_index: int = 0, ledger: TransmissionLedger | None = None,
                 check_remote: bool = False, initial_inverses=None, warmup: int | None = None,
                 loss_rate: float = 0.0, seed: int = 0):
        self.basis = basis
        self.scheme = Scheme(scheme)
        self.smoothing = smoothing or SmoothingConfig()
        self.J = basis.n_nodes
        self.topology = topology or fully_connected(self.J)
        if self.topology.n_nodes != self.J:
            raise ValueError("topology size does not match the node layout")
        self.bin = bin_index
        self.ledger = ledger if ledger is not None else TransmissionLedger()
        self.check_remote = check_remote
        self.max_remote_error = 0.0
        self.loss_rate = loss_rate
        self._rng = np.random.default_rng(seed)
        self.slices = node_slices(basis.node_sizes)
        gbar = basis.gbar
        inits = initial_inverses or [None] * self.J
        if self.scheme is Scheme.CENTRALIZED:
            self.nodes = []
            M = sum(basis.node_sizes)
            self.central = [self._central_estimator(M, inits, warmup) for _ in range(self.J)]
        else:
            self.nodes = [SensorNode(j, basis.block(j), gbar[j], self.scheme, self.smoothing,
                                     inits[j], warmup) for j in range(self.J)]
        # what node j knows about node q: {"D", "z", "frame"}
        self.views = [[dict(D=None, z=None, frame=-1) for _ in range(self.J)] for _ in range(self.J)]
        self._tree_views: dict[int, dict[int, dict]] = defaultdict(dict)

    def _central_estimator(self, M, inits, warmup):
        if self.smoothing.mode is SmoothingMode.RECURSIVE:
            kw = {} if warmup is None else {"warmup": warmup}
            init = None
            if all(i is not None for i in inits):
                from .beamformer import assemble_block_diagonal
                init = assemble_block_diagonal(inits)
            return RecursiveNoiseEstimator(M, self.smoothing.alpha, None, loading=self.smoothing.loading,
                                           initial_inverse=init, **kw)
        return {"inverse": None}

    # ---- transport

    def _transmit(self, msg: WasnMessage, deliver) -> None:
        self.ledger.record(msg)
        if self.loss_rate and self._rng.random() < self.loss_rate:
            return
        deliver(msg)

    # ---- block handling (non-recursive smoothing)

    def begin_block(self, Y_block: np.ndarray, vad_block: np.ndarray) -> None:
        if self.scheme is Scheme.CENTRALIZED:
            speech = np.any(vad_block, axis=1)
            noise = Y_block[~speech]
            for est in self.central:
                if len(noise):
                    est["inverse"] = hermitize(np.linalg.inv(estimate_block_nonrecursive(noise, self.smoothing.loading)))
                elif est["inverse"] is None:
                    est["inverse"] = np.eye(Y_block.shape[1], dtype=complex) / (1e-3 * (np.mean(np.abs(Y_block) ** 2) or 1.0))
            return
        for j, node in enumerate(self.nodes):
            if node.estimator is None and self.scheme is Scheme.DNBD:
                node.begin_block(Y_block[:, self.slices[j]], vad_block[:, j])

    # ---- frames

    def run_frame(self, y: np.ndarray, vad: np.ndarray, frame: int) -> FrameResult:
        vad = np.broadcast_to(np.asarray(vad, dtype=bool), (self.J,))
        if self.scheme is Scheme.CENTRALIZED:
            return self._run_centralized(y, vad, frame)
        if self.topology.kind is TopologyKind.TREE:
            return self.run_frame_tree(y, vad, frame)
        return self.run_frame_fully_connected(y, vad, frame)

    def run(self, Y: np.ndarray, vad: np.ndarray, start_frame: int = 0):
        """Process ``Y`` (``(L, M)``) frame by frame; returns outputs ``(L, J)`` and per-frame results."""
        vad = np.asarray(vad, dtype=bool)
        if vad.ndim == 1:
            vad = np.repeat(vad[:, None], self.J, axis=1)
        results = []
        B = self.smoothing.block_frames
        for l in range(Y.shape[0]):
            if self.smoothing.mode is SmoothingMode.NONRECURSIVE and l % B == 0:
                self.begin_block(Y[l:l + B], vad[l:l + B])
            results.append(self.run_frame(Y[l], vad[l], start_frame + l))
        return np.array([r.outputs for r in results]), results

    def _run_centralized(self, y, vad, frame) -> FrameResult:
        for j in range(self.J):
            self._transmit(RawSignal(j, BROADCAST, frame, self.bin, y[self.slices[j]]), lambda m: None)
        speech = bool(np.any(vad))
        outputs = np.zeros(self.J, dtype=complex)
        for j, est in enumerate(self.central):
            if isinstance(est, RecursiveNoiseEstimator):
                est.step(y, speech)
                inverse = est.inverse
            else:
                inverse = est["inverse"]
            A = inverse @ self.basis.Q
            G = hermitize(np.conj(self.basis.Q.T) @ A)
            w = A @ np.linalg.solve(G, self.basis.gbar[j])
            outputs[j] = np.vdot(w, y)
        return FrameResult([None] * self.J, outputs)

    def _local_steps(self, y, vad):
        return [node.local_step(y[self.slices[j]], bool(vad[j])) for j, node in enumerate(self.nodes)]

    def run_frame_fully_connected(self, y, vad, frame) -> FrameResult:
        """Every node broadcasts its contribution; every node fuses the same inputs.

        A node uses for itself the same view the others reconstruct from its
        broadcast, so all nodes end the frame with bit-identical fusion states.
        """
        steps = self._local_steps(y, vad)
        alpha = self.smoothing.alpha

        def deliver(msg):
            for r in range(self.J):
                view = self.views[r][msg.sender]
                if isinstance(msg, ConstraintD):
                    view["D"] = msg.D
                elif isinstance(msg, CompressedZ):
                    view["z"], view["frame"] = msg.z, msg.frame
                elif isinstance(msg, RankOne):
                    if view["D"] is None:
                        raise IncompleteFusionError(f"node {r} has no D for node {msg.sender}")
                    view["D"], view["z"] = reconstruct_remote(view["D"], msg.payload, alpha)
                    view["frame"] = msg.frame

        for j, st in enumerate(steps):
            if st.rank_one is not None:
                self._transmit(RankOne(j, BROADCAST, frame, self.bin, st.rank_one.c_bar, st.rank_one.c), deliver)
                if self.check_remote:
                    v = self.views[(j + 1) % self.J][j]
                    err = max(np.max(np.abs(v["D"] - st.D)) / max(1.0, np.max(np.abs(st.D))),
                              np.max(np.abs(v["z"] - st.z)) / max(1.0, np.max(np.abs(st.z))))
                    self.max_remote_error = max(self.max_remote_error, float(err))
                continue
            if st.d_changed:
                self._transmit(ConstraintD(j, BROADCAST, frame, self.bin, st.D), deliver)
            self._transmit(CompressedZ(j, BROADCAST, frame, self.bin, st.z), deliver)

        fusion, outputs = [], np.zeros(self.J, dtype=complex)
        for r in range(self.J):
            views = self.views[r]
            missing = [q for q in range(self.J) if views[q]["frame"] != frame or views[q]["D"] is None]
            if missing:
                raise IncompleteFusionError(f"incomplete fusion at node {r}: nothing from nodes {missing}")
            D = views[0]["D"].copy()
            z = views[0]["z"].copy()
            for q in range(1, self.J):
                D = D + views[q]["D"]
                z = z + views[q]["z"]
            fs = FusionState(solve_fused(D, z), D, z)
            fusion.append(fs)
            outputs[r] = np.vdot(self.basis.gbar[r], fs.z_tilde)
        return FrameResult(fusion, outputs)

    def run_frame_tree(self, y, vad, frame) -> FrameResult:
        """Data-driven in-network summation towards the root, then flooding of ``z_tilde``.

        A non-root node fires once it has heard from every neighbour except
        the next hop towards the root. Partial sums carry ``D`` only when some
        block in the sending subtree changed since the previous frame. With
        recursive smoothing a leaf sends its rank-one payload on noise frames;
        the parent rebuilds the leaf's ``(D, z)`` and forwards partial sums.
        """
        topo = self.topology
        parent, children = topo.parents(), topo.children()
        steps = self._local_steps(y, vad)
        alpha = self.smoothing.alpha
        inbox: dict[int, dict[int, WasnMessage]] = defaultdict(dict)
        z_tilde: dict[int, np.ndarray] = {}
        fire_order: list[int] = []
        root_state: dict = {}
        queue: deque = deque()

        def send(msg):
            self._transmit(msg, queue.append)

        def fire(j):
            st = steps[j]
            view = self._tree_views[j]
            z_sum, D_sum, d_changed = st.z, st.D, st.d_changed
            for q in children[j]:
                msg = inbox[j][q]
                known = view.setdefault(q, {"D": None})
                if isinstance(msg, RankOne):
                    if known["D"] is None:
                        raise IncompleteFusionError(f"node {j} has no D for child {q}")
                    known["D"], zq = reconstruct_remote(known["D"], msg.payload, alpha)
                    d_changed = True
                else:
                    zq = msg.z
                    if msg.D is not None:
                        known["D"] = msg.D
                        d_changed = True
                if known["D"] is None:
                    raise IncompleteFusionError(f"node {j} has no D for child {q}")
                z_sum = z_sum + zq
                D_sum = D_sum + known["D"]
            if parent[j] is None:
                zt = solve_fused(D_sum, z_sum)
                root_state.update(D=D_sum, z=z_sum)
                z_tilde[j] = zt
                for q in children[j]:
                    send(FusedZ(j, q, frame, self.bin, zt))
                return
            fire_order.append(j)
            if not children[j] and st.rank_one is not None:
                send(RankOne(j, parent[j], frame, self.bin, st.rank_one.c_bar, st.rank_one.c))
            else:
                send(PartialSum(j, parent[j], frame, self.bin, z_sum, D_sum if d_changed else None))

        for j in range(self.J):
            if not children[j]:
                fire(j)
        while queue:
            msg = queue.popleft()
            r = msg.receiver
            if isinstance(msg, FusedZ):
                z_tilde[r] = msg.z_tilde
                for q in children[r]:
                    send(FusedZ(r, q, frame, self.bin, msg.z_tilde))
                continue
            inbox[r][msg.sender] = msg
            if len(inbox[r]) == len(children[r]):
                fire(r)
        if len(z_tilde) != self.J:
            missing = sorted(set(range(self.J)) - set(z_tilde))
            raise IncompleteFusionError(f"incomplete fusion: nodes {missing} never received z_tilde")
        fusion = []
        outputs = np.zeros(self.J, dtype=complex)
        for j in range(self.J):
            if j == topo.root:
                fusion.append(FusionState(z_tilde[j], root_state["D"], root_state["z"]))
            else:
                fusion.append(FusionState(z_tilde[j]))
            outputs[j] = np.vdot(self.basis.gbar[j], z_tilde[j])
        return FrameResult(fusion, outputs, fire_order)


# --------------------------------------------------------------------------
# analytic costs


@dataclass(frozen=True)
class CostRow:
    beamformer: str
    smoothing: str
    complexity: str
    complexity_value: int
    per_block: bool
    bandwidth: str
    bandwidth_value: int
    checkable: bool


def predict_costs(J: int, N: int, S: int, mode: str | None = None, t_max: int = 1,
                  block_frames: int = 100) -> list[CostRow]:
    """Per-frame complexity and bandwidth (transmitted reals) for every compared beamformer.

    Rows flagged ``checkable`` are implemented here and their bandwidth is
    reproduced exactly by the simulator's ledger; the others are formulas only.
    Non-recursive complexities are amortised over a block (``per_block``).
    """
    for v in (J, N, S, t_max, block_frames):
        if int(v) < 1:
            raise ValueError("all parameters must be positive integers")
    rows = [
        CostRow("LCMV/LCMP", "nonrecursive", "O((JN)^3)/|L_y|", (J * N) ** 3, True, "2JN", 2 * J * N, True),
        CostRow("LC-DANSE", "nonrecursive", "O((N+(J-1)S)^3)/|L_y|", (N + (J - 1) * S) ** 3, True, "2JS", 2 * J * S, False),
        CostRow("BD-LCMV/BD-LCMP", "nonrecursive", "O(N^3)/|L_y|", N ** 3, True, "2JS", 2 * J * S, False),
        CostRow("DNBD-LCMV/DNBD-LCMP", "nonrecursive", "O(S^3)/|L_y|", S ** 3, True, "2JS", 2 * J * S, True),
        CostRow("DNDS", "none", "O(S^3) once", S ** 3, False, "2JS", 2 * J * S, True),
        CostRow("LCMV/LCMP", "recursive", "O((JN)^3)", (J * N) ** 3, False, "2JN", 2 * J * N, True),
        CostRow("BD-LCMV/BD-LCMP", "recursive", "O(N^3)", N ** 3, False, "2JS*t_max*(S+1)",
                2 * J * S * t_max * (S + 1), False),
        CostRow("DNBD-LCMV/DNBD-LCMP", "recursive", "O(S^3)", S ** 3, False, "J(2S+1)", J * (2 * S + 1), True),
    ]
    if mode is not None:
        rows = [r for r in rows if r.smoothing in (mode, "none")]
    return rows
