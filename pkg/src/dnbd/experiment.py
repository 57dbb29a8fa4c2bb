"""Config-driven sweeps over positional error, VAD error and reverberation time.

For every sweep point and repetition the training positions and the sensor
noise are redrawn while the source signals stay fixed. Covariances are
estimated over the whole signal with simulated VAD errors, every beamformer
is applied, and per-node SNR and TDOA errors are written to CSV.

Random streams depend only on ``(seed, repetition)``, never on the sweep
point, so repetition ``k`` uses the same perturbation direction, sensor
noise and (nested) set of VAD-error frames at every point.
"""

from __future__ import annotations

import itertools
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import metrics
from .beamformer import (DegenerateConstraintError, build_basis, centralized_lcmv, dnbd_weights,
                         dnds_weights, node_blocks)
from .covariance import DEFAULT_LOADING, estimate_block_entire_horizon, estimate_noisy_block
from .network import predict_costs
from .scene import (GroundTruth, SceneSpec, perturb_training_positions, render_scene,
                    scene_from_dict, sensor_noise, simulate_vad_error, steering_matrix,
                    synthetic_babble, synthetic_speech)
from .stft import AnalysisConfig, analyze, read_wav, synthesize

log = logging.getLogger(__name__)

BEAMFORMERS = ("lcmv", "lcmp", "dnbd_lcmv", "dnbd_lcmp", "dnds")
CONFIG_ENV = "DNBD_CONFIG_DIR"
PACKAGE_CONFIGS = Path(__file__).parent / "configs"


def config_dirs() -> list[Path]:
    dirs = []
    if os.environ.get(CONFIG_ENV):
        dirs.append(Path(os.environ[CONFIG_ENV]))
    dirs.append(PACKAGE_CONFIGS)
    return dirs


def resolve_config(name, base: Path | None = None) -> Path:
    """Find a config file: as given, next to ``base``, then in the config directories."""
    p = Path(name)
    candidates = [p] if p.is_absolute() else [p, *([base / p] if base else []),
                                             *(d / p for d in config_dirs())]
    for c in candidates:
        if c.is_file():
            return c
    raise FileNotFoundError(f"config file {name} not found (searched {[str(c) for c in candidates]})")


@dataclass
class ExperimentSpec:
    name: str = "experiment"
    scene: str = "scene_default.yaml"
    beamformers: tuple = BEAMFORMERS
    targets: tuple = (1,)
    radii_m: tuple = (0.05,)
    vad_errors: tuple = (0.05,)
    t60_s: tuple = (0.3,)
    repetitions: int = 10
    seed: int = 1
    duration_s: float = 10.0
    loading: float = DEFAULT_LOADING
    frame_length: int = 512
    hop_length: int | None = None
    speech_wav: tuple = ()
    noise_wav: tuple = ()
    output_dir: str = "results"
    base_dir: str | None = field(default=None, repr=False)

    def __post_init__(self):
        for key in ("beamformers", "targets", "radii_m", "vad_errors", "t60_s", "speech_wav", "noise_wav"):
            setattr(self, key, tuple(getattr(self, key)))
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        for key in ("radii_m", "vad_errors", "t60_s"):
            if not getattr(self, key) or min(getattr(self, key)) < 0:
                raise ValueError(f"{key} must be a non-empty list of non-negative values")
        unknown = set(self.beamformers) - set(BEAMFORMERS)
        if unknown:
            raise ValueError(f"unknown beamformers {sorted(unknown)}; choose from {BEAMFORMERS}")
        if self.duration_s <= 0:
            raise ValueError("duration must be positive")

    @classmethod
    def from_dict(cls, cfg: dict, base_dir=None) -> "ExperimentSpec":
        known = {k: v for k, v in cfg.items() if k in cls.__dataclass_fields__}
        extra = set(cfg) - set(known)
        if extra:
            raise ValueError(f"unknown experiment keys {sorted(extra)}")
        return cls(**known, base_dir=None if base_dir is None else str(base_dir))

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        path = resolve_config(path)
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {}, base_dir=path.parent)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def points(self) -> list[tuple[float, float, float]]:
        return list(itertools.product(self.t60_s, self.radii_m, self.vad_errors))

    def scene_spec(self, t60: float) -> SceneSpec:
        base = Path(self.base_dir) if self.base_dir else None
        with open(resolve_config(self.scene, base)) as fh:
            cfg = yaml.safe_load(fh)
        cfg.setdefault("room", {})["t60"] = t60
        return scene_from_dict(cfg)

    def hash(self) -> str:
        return metrics.config_hash(self.to_dict())


@dataclass
class RenderedScene:
    """One rendered world shared by all repetitions at a given reverberation time."""

    scene: SceneSpec
    cfg: AnalysisConfig
    truth: GroundTruth
    Y_speech: np.ndarray   # (S, L, F, M)
    Y_noise: np.ndarray    # (L, F, M), directional noise only
    speech_power: float
    n_samples: int


def source_signals(spec: ExperimentSpec, scene: SceneSpec) -> tuple[list, list]:
    fs = scene.sample_rate_hz
    n = int(round(spec.duration_s * fs))
    rng = np.random.default_rng([spec.seed, 0])
    base = Path(spec.base_dir) if spec.base_dir else None

    def load(paths, count, make):
        if not paths:
            return [make(n, fs, rng) for _ in range(count)]
        if len(paths) != count:
            raise ValueError(f"need {count} WAV files, got {len(paths)}")
        out = []
        for p in paths:
            x, wav_fs = read_wav(resolve_config(p, base))
            if wav_fs != fs:
                raise ValueError(f"{p}: sample rate {wav_fs} Hz, scene uses {fs} Hz")
            x = np.resize(x[:, 0], n)
            out.append(x / (np.std(x) + 1e-300))
        return out

    speech = load(spec.speech_wav, len(scene.speakers), synthetic_speech)
    noise = load(spec.noise_wav, len(scene.noise_sources), synthetic_babble)
    return speech, noise


def prepare(spec: ExperimentSpec, t60: float) -> RenderedScene:
    scene = spec.scene_spec(t60)
    cfg = AnalysisConfig(sample_rate_hz=scene.sample_rate_hz, frame_length=spec.frame_length,
                         hop_length=spec.hop_length or spec.frame_length // 2)
    speech, noise = source_signals(spec, scene)
    _, truth = render_scene(scene, speech, noise, cfg)
    Y_speech = np.stack([analyze(img, cfg) for img in truth.speech_images])
    Y_noise = analyze(truth.noise_images.sum(axis=0), cfg)
    speech_power = float(np.mean(truth.speech_images.sum(axis=0)[:, 0] ** 2))
    return RenderedScene(scene, cfg, truth, Y_speech, Y_noise, speech_power,
                         truth.speech_images.shape[1])


def _max_lag(scene: SceneSpec) -> int:
    ref = scene.mic_positions[scene.reference_rows]
    span = np.max(np.linalg.norm(ref[:, None] - ref[None], axis=-1))
    return int(np.ceil(span / scene.room.speed_of_sound * scene.sample_rate_hz)) + 2


def beamformer_weights(name: str, basis, R_nn, R_yy, node_sizes) -> np.ndarray:
    """Weights ``(F, J, M)`` of one beamformer for every node."""
    J = len(node_sizes)
    if name == "dnds":
        return np.stack([dnds_weights(basis, j) for j in range(J)], axis=-2)
    R = R_nn if name.endswith("lcmv") else R_yy
    if name.startswith("dnbd"):
        blocks = node_blocks(R, node_sizes)
        return np.stack([dnbd_weights(blocks, basis, j) for j in range(J)], axis=-2)
    return np.stack([centralized_lcmv(R, basis, j) for j in range(J)], axis=-2)


def _apply(W_conj: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """``(F, J, M)`` conjugated weights applied to ``(L, F, M)`` frames, giving ``(L, F, J)``."""
    out = np.swapaxes(Y, 0, 1) @ np.swapaxes(W_conj, -1, -2)  # (F, L, J)
    return np.swapaxes(out, 0, 1)


def run_setup(spec: ExperimentSpec, rs: RenderedScene, radius: float, vad_error: float,
              rep: int) -> list[metrics.EvalResult]:
    """One setup: draw training positions, sensor noise and VAD errors, evaluate all beamformers."""
    scene, cfg, truth = rs.scene, rs.cfg, rs.truth
    S = len(scene.speakers)
    positions = perturb_training_positions(scene, [radius] * S, np.random.default_rng([spec.seed, 1, rep]))
    Q = steering_matrix(scene, positions, cfg)
    sensor = sensor_noise(scene, rs.n_samples, rs.speech_power, np.random.default_rng([spec.seed, 2, rep]))
    Y_noise = rs.Y_noise + analyze(sensor, cfg)
    Y = rs.Y_speech.sum(axis=0) + Y_noise
    contaminated = simulate_vad_error(truth, vad_error, np.random.default_rng([spec.seed, 3, rep]))
    # the DC bin carries no speech after the room high-pass, so the basis is degenerate there
    bins = slice(1, None)
    R_nn = estimate_block_entire_horizon(Y[:, bins], Y_noise[:, bins], contaminated, loading=spec.loading)
    R_yy = estimate_noisy_block(Y[:, bins], spec.loading)
    J = len(scene.nodes)
    max_lag = _max_lag(scene)
    fs = scene.sample_rate_hz
    results = []
    for target in spec.targets:
        s = int(target) - 1
        if not 0 <= s < S:
            raise ValueError(f"target speaker {target} out of range 1..{S}")
        selection = np.zeros((J, S))
        selection[:, s] = 1
        basis = build_basis(Q[bins], scene.node_sizes, selection)
        Y_rest = Y[:, bins] - rs.Y_speech[s][:, bins]
        for name in spec.beamformers:
            W = np.conj(beamformer_weights(name, basis, R_nn, R_yy, scene.node_sizes))
            out = np.zeros(Y.shape[:2] + (J,), dtype=complex)
            res = np.zeros_like(out)
            out[:, bins] = _apply(W, Y[:, bins])
            res[:, bins] = _apply(W, Y_rest)
            d = synthesize(out, cfg)
            n = synthesize(res, cfg)
            snr = [metrics.snr(d[:, j], n[:, j]) for j in range(J)]
            est = metrics.output_tdoas(d, max_lag, fs)
            err = np.abs(truth.tdoa[:, s] - est)
            err[0] = 0.0
            results.append(metrics.EvalResult(name, s, snr, err, meta=dict(rep=rep)))
    return results


def _transmissions(name: str, J: int, N: int, S: int) -> int:
    rows = {(r.beamformer, r.smoothing): r for r in predict_costs(J, N, S)}
    if name == "dnds":
        return rows[("DNDS", "none")].bandwidth_value
    if name.startswith("dnbd"):
        return rows[("DNBD-LCMV/DNBD-LCMP", "nonrecursive")].bandwidth_value
    return rows[("LCMV/LCMP", "nonrecursive")].bandwidth_value


def _run_point(args):
    spec, rs, t60, radius, vad_error, rep = args
    try:
        return args[2:], run_setup(spec, rs, radius, vad_error, rep), None
    except (ValueError, np.linalg.LinAlgError, DegenerateConstraintError) as exc:
        return args[2:], [], f"{type(exc).__name__}: {exc}"


@dataclass
class ExperimentOutcome:
    rows: list
    failures: list
    csv_path: Path | None = None
    dat_path: Path | None = None

    def summary(self) -> dict:
        """Mean SNR per (t60, radius, vad_error, beamformer) for the first target."""
        out = {}
        for r in self.rows:
            if r["rep"] == "mean" and r["metric"] == "snr_db":
                out[(r["t60_s"], r["radius_m"], r["vad_error"], r["beamformer"], r["speaker"])] = r["value"]
        return out


def run_experiment(spec: ExperimentSpec, out_dir=None, workers: int = 1, write: bool = True) -> ExperimentOutcome:
    """Run every sweep point and repetition; write ``<name>.csv`` and ``<name>.dat``.

    A failing repetition is logged and skipped; its diagnostic is returned in
    ``failures``.
    """
    chash = spec.hash()
    rows, failures = [], []
    for t60 in spec.t60_s:
        rs = prepare(spec, t60)
        J = len(rs.scene.nodes)
        N = max(rs.scene.node_sizes)
        S = len(rs.scene.speakers)
        jobs = [(spec, rs, t60, r, R, rep) for r, R in itertools.product(spec.radii_m, spec.vad_errors)
                for rep in range(spec.repetitions)]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                done = list(pool.map(_run_point, jobs))
        else:
            done = [_run_point(j) for j in jobs]
        by_point: dict = {}
        for (t60_, r, R, rep), results, err in done:
            meta = dict(config_hash=chash, t60_s=float(t60_), radius_m=float(r), vad_error=float(R))
            if err is not None:
                log.error("t60=%s r=%s R=%s rep=%d failed: %s", t60_, r, R, rep, err)
                failures.append(dict(meta, rep=rep, error=err))
                continue
            for res in results:
                res.meta.update(meta)
                res.transmissions = {"reals_per_frame_bin": _transmissions(res.beamformer, J, N, S)}
                rows.extend(res.rows())
            by_point.setdefault((r, R), []).extend(results)
        for (r, R), results in by_point.items():
            meta = dict(config_hash=chash, t60_s=float(t60), radius_m=float(r), vad_error=float(R))
            rows.extend(metrics.aggregate_rows(results, meta))
    outcome = ExperimentOutcome(rows, failures)
    if write:
        out = Path(out_dir or spec.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        outcome.csv_path = out / f"{spec.name}.csv"
        outcome.dat_path = out / f"{spec.name}.dat"
        metrics.write_csv(rows, outcome.csv_path)
        write_gnuplot(outcome, spec, outcome.dat_path)
    return outcome


def write_gnuplot(outcome: ExperimentOutcome, spec: ExperimentSpec, path) -> None:
    """Whitespace table: one block per (t60, target, metric), one column per beamformer."""
    agg = {}
    for r in outcome.rows:
        if r["rep"] == "mean":
            agg[(r["t60_s"], r["speaker"], r["metric"], r["radius_m"], r["vad_error"], r["beamformer"])] = r["value"]
    with open(path, "w") as fh:
        fh.write(f"# config_hash {spec.hash()}\n")
        for t60, spk, metric in itertools.product(spec.t60_s, spec.targets, ("snr_db", "tdoa_err_s")):
            fh.write(f"# t60_s={t60} speaker={spk} metric={metric}\n")
            fh.write("# radius_m vad_error " + " ".join(spec.beamformers) + "\n")
            for r, R in itertools.product(spec.radii_m, spec.vad_errors):
                vals = [agg.get((float(t60), int(spk), metric, float(r), float(R), b), float("nan"))
                        for b in spec.beamformers]
                fh.write(f"{r:g} {R:g} " + " ".join(f"{v:.6g}" for v in vals) + "\n")
            fh.write("\n\n")
