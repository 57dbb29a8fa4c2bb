"""Acoustic scene synthesis.

Shoebox rooms are simulated with the image-source method (Allen & Berkley
style, one reflection coefficient for all walls from Sabine's formula).
Fractional propagation delays are realised with an 8-tap Hann-windowed sinc.
Reverberant responses pass through a 100 Hz high-pass: all image amplitudes
are positive, and without it the low-frequency build-up stretches the decay
well past the requested T60.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml
from scipy.signal import butter, fftconvolve, lfilter

from .stft import AnalysisConfig, analyze

FRAC_DELAY_TAPS = 8
TRUNCATION_DB = -60.0
HIGHPASS_HZ = 100.0


@dataclass(frozen=True)
class RoomSpec:
    dimensions: tuple[float, float, float] = (5.0, 5.0, 3.0)
    t60: float = 0.3
    speed_of_sound: float = 343.0

    def __post_init__(self):
        object.__setattr__(self, "dimensions", tuple(float(d) for d in self.dimensions))
        if len(self.dimensions) != 3 or min(self.dimensions) <= 0:
            raise ValueError(f"room dimensions must be three positive lengths, got {self.dimensions}")
        if self.t60 < 0:
            raise ValueError("t60 must be >= 0")
        if self.speed_of_sound <= 0:
            raise ValueError("speed of sound must be positive")

    def contains(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p > 0) and np.all(p < np.asarray(self.dimensions)))

    def reflection_coefficient(self) -> float:
        """Pressure reflection coefficient of every wall from Sabine's formula (0 when anechoic)."""
        if self.t60 == 0:
            return 0.0
        lx, ly, lz = self.dimensions
        volume = lx * ly * lz
        surface = 2 * (lx * ly + lx * lz + ly * lz)
        absorption = 24 * np.log(10) * volume / (self.speed_of_sound * surface * self.t60)
        if absorption >= 1:
            raise ValueError(f"t60={self.t60}s is too short for this room (Sabine absorption >= 1)")
        return float(np.sqrt(1 - absorption))

    def default_max_order(self) -> int:
        # reflections whose energy gain is below -60 dB are dropped
        beta = self.reflection_coefficient()
        if beta == 0:
            return 0
        return int(np.ceil(TRUNCATION_DB / 10 * np.log(10) / (2 * np.log(beta))))


@dataclass
class NoiseSource:
    position: tuple[float, float, float]
    snr_db: float = 10.0


@dataclass
class SceneSpec:
    room: RoomSpec
    nodes: list[np.ndarray]
    speakers: list[tuple[float, float, float]]
    noise_sources: list[NoiseSource] = field(default_factory=list)
    sensor_noise_snr_db: float = 30.0
    training_radii: tuple[float, ...] = ()
    seed: int = 0
    sample_rate_hz: int = 8000
    max_order: int | None = None

    def __post_init__(self):
        self.nodes = [np.atleast_2d(np.asarray(n, dtype=float)) for n in self.nodes]
        self.speakers = [tuple(float(v) for v in s) for s in self.speakers]
        self.noise_sources = [
            n if isinstance(n, NoiseSource) else NoiseSource(**n) for n in self.noise_sources
        ]
        if not self.training_radii:
            self.training_radii = (0.0,) * len(self.speakers)
        self.training_radii = tuple(float(r) for r in self.training_radii)
        self.validate()

    def validate(self) -> None:
        if not self.speakers:
            raise ValueError("scene needs at least one speaker")
        if not self.nodes:
            raise ValueError("scene needs at least one node")
        for j, mics in enumerate(self.nodes):
            if mics.shape[0] < 1 or mics.shape[1] != 3:
                raise ValueError(f"node {j}: expected (M_j, 3) microphone positions")
            for p in mics:
                if not self.room.contains(p):
                    raise ValueError(f"node {j}: microphone {tuple(p)} outside the room")
        for p in self.speakers + [n.position for n in self.noise_sources]:
            if not self.room.contains(p):
                raise ValueError(f"source {tuple(p)} outside the room")
        if len(self.training_radii) != len(self.speakers):
            raise ValueError("one training radius per speaker is required")

    @property
    def node_sizes(self) -> tuple[int, ...]:
        return tuple(m.shape[0] for m in self.nodes)

    @property
    def mic_positions(self) -> np.ndarray:
        return np.vstack(self.nodes)

    @property
    def reference_rows(self) -> list[int]:
        """Stacked row index of each node's first (reference) microphone."""
        return [int(v) for v in np.concatenate([[0], np.cumsum(self.node_sizes)[:-1]])]


@dataclass
class GroundTruth:
    """Reference quantities produced alongside the microphone mix.

    ``vad`` has shape ``(n_frames, J)``; ``speech_images`` ``(S, n, M)``;
    ``noise_images`` ``(V, n, M)``; ``sensor_noise`` ``(n, M)``;
    ``tdoa`` ``(J, S)`` in seconds relative to node 1's reference microphone.
    """

    vad: np.ndarray
    speech_images: np.ndarray
    noise_images: np.ndarray
    sensor_noise: np.ndarray
    tdoa: np.ndarray
    reference_rows: list[int]

    @property
    def desired_images(self) -> np.ndarray:
        """Clean speech images at each node's reference microphone, ``(S, n, J)``."""
        return self.speech_images[:, :, self.reference_rows]

    @property
    def noise(self) -> np.ndarray:
        """Everything that is not speech: directional noise plus sensor noise."""
        return self.noise_images.sum(axis=0) + self.sensor_noise


# --------------------------------------------------------------------------
# image method


def image_sources(room: RoomSpec, src, max_order: int) -> tuple[np.ndarray, np.ndarray]:
    """Image positions ``(K, 3)`` and their reflection gains ``(K,)``."""
    src = np.asarray(src, dtype=float)
    dims = np.asarray(room.dimensions)
    beta = room.reflection_coefficient()
    if max_order == 0 or beta == 0:
        return src[None, :], np.ones(1)
    half = max_order // 2 + 1
    n = np.arange(-half, half + 1)
    grids = np.stack(np.meshgrid(n, n, n, indexing="ij"), axis=-1).reshape(-1, 3)
    positions, orders = [], []
    for p in np.ndindex(2, 2, 2):
        p = np.asarray(p)
        order = (np.abs(grids - p) + np.abs(grids)).sum(axis=1)
        keep = order <= max_order
        positions.append((1 - 2 * p) * src + 2 * grids[keep] * dims)
        orders.append(order[keep])
    orders = np.concatenate(orders)
    return np.vstack(positions), beta ** orders.astype(float)


def _frac_delay_kernel(frac: np.ndarray):
    half = FRAC_DELAY_TAPS // 2
    offsets = np.arange(-half + 1, half + 1)
    x = offsets[None, :] - frac[:, None]
    w = 0.5 * (1 + np.cos(np.pi * x / half))
    return offsets, np.sinc(x) * w


def generate_rirs(room: RoomSpec, src, mics, fs: int = 8000, max_order: int | None = None,
                  length: int | None = None, chunk: int = 20000) -> np.ndarray:
    """RIRs from one source to many microphones, shape ``(M, length)``."""
    mics = np.atleast_2d(np.asarray(mics, dtype=float))
    src = np.asarray(src, dtype=float)
    if not room.contains(src):
        raise ValueError(f"source {tuple(src)} outside the room")
    for m in mics:
        if not room.contains(m):
            raise ValueError(f"microphone {tuple(m)} outside the room")
        if np.allclose(m, src):
            raise ValueError("source and microphone coincide")
    if max_order is None:
        max_order = room.default_max_order()
    images, gains = image_sources(room, src, max_order)
    c = room.speed_of_sound
    if length is None:
        spread = np.linalg.norm(mics - mics[0], axis=1).max()
        far = np.linalg.norm(images - mics[0], axis=1).max() + spread
        length = int(np.ceil(far / c * fs)) + FRAC_DELAY_TAPS
    n_mics = mics.shape[0]
    out = np.zeros(n_mics * length)
    for start in range(0, len(images), chunk):
        img, g = images[start:start + chunk], gains[start:start + chunk]
        dist = np.linalg.norm(img[:, None, :] - mics[None, :, :], axis=-1)  # (K, M)
        amp = g[:, None] / (4 * np.pi * dist)
        delay = dist * fs / c
        whole = np.floor(delay)
        frac = (delay - whole).ravel()
        offsets, kern = _frac_delay_kernel(frac)
        taps = whole.ravel()[:, None].astype(int) + offsets[None, :]
        weights = kern * amp.ravel()[:, None]
        mic_idx = np.broadcast_to(np.arange(n_mics)[None, :], dist.shape).ravel()
        ok = (taps >= 0) & (taps < length)
        flat = (mic_idx[:, None] * length + taps)[ok]
        out += np.bincount(flat, weights=weights[ok], minlength=n_mics * length)
    out = out.reshape(n_mics, length)
    if max_order > 0 and room.t60 > 0:
        b, a = butter(2, HIGHPASS_HZ / (fs / 2), "high")
        out = lfilter(b, a, out, axis=1)
    return out


def generate_rir(room: RoomSpec, src, mic, fs: int = 8000, max_order: int | None = None,
                 length: int | None = None) -> np.ndarray:
    return generate_rirs(room, src, [mic], fs, max_order, length)[0]


def transfer_functions(room: RoomSpec, src, mics, cfg: AnalysisConfig,
                       max_order: int | None = None) -> np.ndarray:
    """ATFs source -> mics sampled at the STFT bin frequencies, ``(n_bins, M)``."""
    h = generate_rirs(room, src, mics, cfg.sample_rate_hz, max_order)
    n = cfg.frame_length
    nfft = n * int(np.ceil(h.shape[1] / n))
    H = np.fft.rfft(h, n=nfft, axis=1)[:, :: nfft // n]
    return H.T


def steering_matrix(spec: SceneSpec, positions, cfg: AnalysisConfig) -> np.ndarray:
    """Stacked ATF matrix ``(n_bins, M, S)`` for sources at ``positions``."""
    mics = spec.mic_positions
    cols = [transfer_functions(spec.room, p, mics, cfg, spec.max_order) for p in positions]
    return np.stack(cols, axis=-1)


# --------------------------------------------------------------------------
# rendering


def _scaled_power(x: np.ndarray) -> float:
    return float(np.mean(x ** 2))


def theoretical_tdoa(spec: SceneSpec) -> np.ndarray:
    ref = spec.mic_positions[spec.reference_rows]
    spk = np.asarray(spec.speakers)
    dist = np.linalg.norm(ref[:, None, :] - spk[None, :, :], axis=-1)
    return (dist - dist[0:1]) / spec.room.speed_of_sound


def vad_labels(speech_images: np.ndarray, reference_rows: Sequence[int],
               cfg: AnalysisConfig, floor_db: float = -40.0) -> np.ndarray:
    """Per-frame, per-node speech activity from clean images at the reference mics.

    A frame is active when any speaker's windowed frame energy at the node's
    reference microphone exceeds that speaker's long-term mean frame energy
    plus ``floor_db``.
    """
    n_frames = cfg.n_frames(speech_images.shape[1])
    vad = np.zeros((n_frames, len(reference_rows)), dtype=bool)
    for img in speech_images:
        X = analyze(img[:, list(reference_rows)], cfg)
        energy = np.sum(np.abs(X) ** 2, axis=1)  # (L, J)
        mean = energy.mean(axis=0)
        active = (energy > mean * 10 ** (floor_db / 10)) & (mean > 0)
        vad |= active
    return vad


def render_scene(spec: SceneSpec, speech: Sequence[np.ndarray], noise: Sequence[np.ndarray],
                 cfg: AnalysisConfig | None = None, rirs: dict | None = None):
    """Render microphone signals and ground truth.

    Speakers are scaled to equal power at the first microphone of node 1,
    each directional noise source to ``snr_db`` below one speaker there, and
    white sensor noise to ``sensor_noise_snr_db`` below the superimposed
    speech at that microphone (unit reference power when there is no speech).

    Returns ``(mix, truth)`` with ``mix`` of shape ``(n_samples, M)``.
    """
    cfg = cfg or AnalysisConfig(sample_rate_hz=spec.sample_rate_hz)
    if len(speech) != len(spec.speakers):
        raise ValueError(f"{len(spec.speakers)} speakers but {len(speech)} speech signals")
    if len(noise) != len(spec.noise_sources):
        raise ValueError(f"{len(spec.noise_sources)} noise sources but {len(noise)} noise signals")
    signals = [np.asarray(s, dtype=float) for s in list(speech) + list(noise)]
    lengths = {len(s) for s in signals}
    if len(lengths) != 1:
        raise ValueError(f"length mismatch between source signals: {sorted(lengths)}")
    n = lengths.pop()
    mics = spec.mic_positions
    fs = spec.sample_rate_hz
    rirs = rirs if rirs is not None else {}

    def image(src, sig):
        key = tuple(np.round(src, 12))
        if key not in rirs:
            rirs[key] = generate_rirs(spec.room, src, mics, fs, spec.max_order)
        return fftconvolve(rirs[key], sig[None, :], axes=1)[:, :n].T

    speech_images = np.stack([image(p, s) for p, s in zip(spec.speakers, speech)])
    p_ref = np.array([_scaled_power(img[:, 0]) for img in speech_images])
    target = p_ref.max() if p_ref.max() > 0 else 0.0
    for k in range(len(speech_images)):
        if p_ref[k] > 0:
            speech_images[k] *= np.sqrt(target / p_ref[k])

    noise_images = np.zeros((len(spec.noise_sources), n, mics.shape[0]))
    for v, (src, sig) in enumerate(zip(spec.noise_sources, noise)):
        img = image(src.position, np.asarray(sig, dtype=float))
        p = _scaled_power(img[:, 0])
        if p > 0 and target > 0:
            img *= np.sqrt(target * 10 ** (-src.snr_db / 10) / p)
        noise_images[v] = img

    speech_power = _scaled_power(speech_images.sum(axis=0)[:, 0])
    sensor = sensor_noise(spec, n, speech_power, np.random.default_rng(spec.seed))

    mix = speech_images.sum(axis=0) + noise_images.sum(axis=0) + sensor
    truth = GroundTruth(
        vad=vad_labels(speech_images, spec.reference_rows, cfg),
        speech_images=speech_images,
        noise_images=noise_images,
        sensor_noise=sensor,
        tdoa=theoretical_tdoa(spec),
        reference_rows=spec.reference_rows,
    )
    return mix, truth


def sensor_noise(spec: SceneSpec, n_samples: int, speech_power: float, rng) -> np.ndarray:
    ref = speech_power if speech_power > 0 else 1.0
    sigma = np.sqrt(ref * 10 ** (-spec.sensor_noise_snr_db / 10))
    return sigma * rng.standard_normal((n_samples, spec.mic_positions.shape[0]))


# --------------------------------------------------------------------------
# perturbations and VAD errors


def perturb_training_positions(spec: SceneSpec, radii: Sequence[float] | None, rng,
                               max_tries: int = 10000) -> list[np.ndarray]:
    """Draw one training position per speaker, uniform on a sphere of the given radius."""
    radii = spec.training_radii if radii is None else radii
    if len(radii) != len(spec.speakers):
        raise ValueError("one radius per speaker is required")
    out = []
    for p, r in zip(spec.speakers, radii):
        p = np.asarray(p, dtype=float)
        if r < 0:
            raise ValueError("radius must be >= 0")
        if r == 0:
            out.append(p.copy())
            continue
        for _ in range(max_tries):
            u = rng.standard_normal(3)
            u /= np.linalg.norm(u)
            q = p + r * u
            if spec.room.contains(q):
                out.append(q)
                break
        else:
            raise ValueError(f"no in-room point at radius {r} around {tuple(p)}")
    return out


def simulate_vad_error(truth: GroundTruth, rate: float, rng) -> np.ndarray:
    """Indices of speech frames wrongly labelled noise-only.

    ``rate`` is the fraction of all frames; the frames are drawn without
    replacement from frames that are speech-active at every node.
    """
    if rate < 0:
        raise ValueError("VAD error rate must be >= 0")
    n_frames = truth.vad.shape[0]
    count = int(np.floor(rate * n_frames + 0.5))
    active = np.flatnonzero(truth.vad.all(axis=1))
    if count > len(active):
        raise ValueError(
            f"VAD error rate {rate:.3f} needs {count} speech frames, only {len(active)} available"
        )
    # prefix of a random permutation: with equal seeds, larger rates extend smaller ones
    return np.sort(rng.permutation(active)[:count])


# --------------------------------------------------------------------------
# diffuse fields


def diffuse_coherence(f, distance, c: float = 343.0):
    """Spatial coherence of a spherically isotropic field, sin(x)/x with x = 2 pi f d / c."""
    f = np.asarray(f, dtype=float)
    distance = np.asarray(distance, dtype=float)
    if np.any(f < 0) or np.any(distance < 0):
        raise ValueError("frequency and distance must be >= 0")
    out = np.sinc(2 * f * distance / c)
    return out.item() if out.ndim == 0 else out


def synthesize_diffuse_field(mics, n_samples: int, fs: int, rng, n_sources: int = 256,
                             c: float = 343.0) -> np.ndarray:
    """Superpose independent white plane waves from uniformly random directions.

    Returns ``(n_samples, M)``. Delays are applied exactly in the frequency
    domain (circularly).
    """
    mics = np.atleast_2d(np.asarray(mics, dtype=float))
    freqs = np.fft.rfftfreq(n_samples, 1 / fs)
    acc = np.zeros((len(freqs), mics.shape[0]), dtype=complex)
    for _ in range(n_sources):
        u = rng.standard_normal(3)
        u /= np.linalg.norm(u)
        S = np.fft.rfft(rng.standard_normal(n_samples))
        tau = -(mics @ u) / c
        acc += S[:, None] * np.exp(-2j * np.pi * freqs[:, None] * tau[None, :])
    return np.fft.irfft(acc, n=n_samples, axis=0) / np.sqrt(n_sources)


# --------------------------------------------------------------------------
# source signals


def synthetic_speech(n_samples: int, fs: int, rng) -> np.ndarray:
    """Speech-like test signal.

    Talk spurts separated by pauses; each spurt is a run of syllables, mostly
    voiced (glottal pulse train with a gliding pitch) and occasionally
    unvoiced (noise), shaped by three formant resonances drawn per syllable.
    """
    out = np.zeros(n_samples)
    base_f0 = rng.uniform(100, 200)
    t = int(rng.uniform(0.1, 0.4) * fs)
    while t < n_samples:
        end = min(n_samples, t + int(rng.uniform(0.5, 1.5) * fs))
        pos = t
        while pos < end:
            k = np.arange(min(end - pos, int(rng.uniform(0.12, 0.3) * fs)))
            if rng.random() < 0.2:
                exc = 0.3 * rng.standard_normal(len(k))
            else:
                f0 = base_f0 * (1 + 0.15 * np.sin(2 * np.pi * rng.uniform(1, 3) * k / fs + rng.uniform(0, 2 * np.pi)))
                cycles = np.floor(np.cumsum(f0 / fs))
                pulses = np.diff(cycles, prepend=cycles[0])
                exc = lfilter([1.0], [1.0, -0.95], pulses)
            y = exc
            for lo, hi, bw in ((300, 800, 90.0), (900, 2200, 120.0), (2300, 3200, 180.0)):
                r = np.exp(-np.pi * bw / fs)
                theta = 2 * np.pi * rng.uniform(lo, hi) / fs
                y = lfilter([1 - r], [1.0, -2 * r * np.cos(theta), r * r], y)
            ramp = np.minimum(1.0, np.minimum(k, k[::-1]) / (0.01 * fs))
            out[pos:pos + len(k)] = y * ramp * rng.uniform(0.5, 1.0)
            pos += len(k)
        t = end + int(rng.uniform(0.3, 0.8) * fs)
    return out / (np.std(out) + 1e-300)


def synthetic_babble(n_samples: int, fs: int, rng, talkers: int = 6) -> np.ndarray:
    x = sum(synthetic_speech(n_samples, fs, rng) for _ in range(talkers))
    return x / np.std(x)


# --------------------------------------------------------------------------
# configuration files


def linear_array(center, axis, n_mics: int, spacing: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    offsets = (np.arange(n_mics) - (n_mics - 1) / 2) * spacing
    return np.asarray(center, dtype=float)[None, :] + offsets[:, None] * axis[None, :]


def scene_from_dict(cfg: dict) -> SceneSpec:
    room = RoomSpec(**cfg.get("room", {}))
    nodes = []
    for node in cfg["nodes"]:
        if "mics" in node:
            nodes.append(np.asarray(node["mics"], dtype=float))
        else:
            nodes.append(linear_array(node["center"], node["axis"], int(node["n_mics"]),
                                      float(node["spacing"])))
    return SceneSpec(
        room=room,
        nodes=nodes,
        speakers=[tuple(s) for s in cfg["speakers"]],
        noise_sources=[NoiseSource(tuple(n["position"]), float(n.get("snr_db", 10.0)))
                       for n in cfg.get("noise_sources", [])],
        sensor_noise_snr_db=float(cfg.get("sensor_noise_snr_db", 30.0)),
        training_radii=tuple(cfg.get("training_radii", ())),
        seed=int(cfg.get("seed", 0)),
        sample_rate_hz=int(cfg.get("sample_rate_hz", 8000)),
        max_order=cfg.get("max_order"),
    )


def load_scene(path) -> SceneSpec:
    with open(path) as fh:
        return scene_from_dict(yaml.safe_load(fh))


def default_scene_path() -> Path:
    return Path(__file__).parent / "configs" / "scene_default.yaml"


def default_scene(**overrides) -> SceneSpec:
    with open(default_scene_path()) as fh:
        cfg = yaml.safe_load(fh)
    room = dict(cfg.get("room", {}))
    for key in ("t60",):
        if key in overrides:
            room[key] = overrides.pop(key)
    cfg["room"] = room
    cfg.update(overrides)
    return scene_from_dict(cfg)
