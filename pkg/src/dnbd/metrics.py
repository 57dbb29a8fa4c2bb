"""Output SNR, GCC-PHAT TDOA estimation, average TDOA error and result tables."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

CSV_COLUMNS = ("config_hash", "t60_s", "radius_m", "vad_error", "rep", "beamformer",
               "speaker", "node", "metric", "value")


def snr(output, noise_component) -> float:
    """Output SNR in dB: ``10 log10((E{d^2} - E{n^2}) / E{n^2})``.

    ``noise_component`` is the part of ``output`` due to noise and competing
    speech (obtained by shadow filtering). A speech estimate with less power
    than the noise estimate is clipped at -120 dB so the result stays finite.
    """
    d = np.asarray(output, dtype=float)
    n = np.asarray(noise_component, dtype=float)
    if d.shape != n.shape:
        raise ValueError("output and noise component must have equal lengths")
    p_n = float(np.mean(n ** 2))
    if not p_n > 0:
        raise ValueError("undefined SNR: zero noise power")
    ratio = (float(np.mean(d ** 2)) - p_n) / p_n
    return float(10 * np.log10(max(ratio, 1e-12)))


def gcc_phat_tdoa(a, b, max_lag: int, fs: float = 1.0) -> float:
    """Delay of ``b`` relative to ``a`` in seconds (positive when ``b`` lags).

    Phase-transform weighted cross-correlation over lags ``[-max_lag, max_lag]``
    with 3-point parabolic refinement of the peak.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("expected two equal-length 1-D signals")
    _check_lag(len(a), max_lag)
    nfft = _nfft(len(a))
    return _phat_delay(np.fft.rfft(a, nfft), np.fft.rfft(b, nfft), nfft, max_lag) / fs


def _check_lag(n: int, max_lag: int) -> None:
    if max_lag < 1 or n < 4 * max_lag:
        raise ValueError("signals must be at least 4*max_lag samples long")


def _nfft(n: int) -> int:
    return 1 << int(np.ceil(np.log2(2 * n)))


def _phat_delay(A: np.ndarray, B: np.ndarray, nfft: int, max_lag: int) -> float:
    G = B * np.conj(A)
    mag = np.abs(G)
    peak = mag.max()
    if not peak > 0:
        raise ValueError("degenerate spectrum: cross-spectrum is zero")
    keep = mag > 1e-12 * peak
    W = np.zeros_like(G)
    W[keep] = G[keep] / mag[keep]
    r = np.fft.irfft(W, nfft)
    lags = np.arange(-max_lag, max_lag + 1)
    cc = r[lags % nfft]
    k = int(np.argmax(cc))
    shift = 0.0
    if 0 < k < len(cc) - 1:
        y0, y1, y2 = cc[k - 1], cc[k], cc[k + 1]
        den = y0 - 2 * y1 + y2
        if den < 0:
            shift = 0.5 * (y0 - y2) / den
    return float(lags[k] + shift)


def ate(estimated: Sequence[float], theoretical: Sequence[float]) -> float:
    """Average TDOA error over nodes 2..J; index 0 is the reference node."""
    est = np.asarray(estimated, dtype=float)
    th = np.asarray(theoretical, dtype=float)
    if est.shape != th.shape or est.ndim != 1:
        raise ValueError("estimated and theoretical TDOAs must be equal-length vectors")
    if len(est) < 2:
        raise ValueError("ATE needs at least two nodes")
    return float(np.mean(np.abs(th[1:] - est[1:])))


def output_tdoas(outputs: np.ndarray, max_lag: int, fs: float) -> np.ndarray:
    """TDOA of every node's output relative to node 1's, ``outputs`` shaped ``(n, J)``."""
    _check_lag(outputs.shape[0], max_lag)
    nfft = _nfft(outputs.shape[0])
    X = np.fft.rfft(outputs, nfft, axis=0)
    return np.array([_phat_delay(X[:, 0], X[:, j], nfft, max_lag) / fs for j in range(outputs.shape[1])])


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class EvalResult:
    """Metrics of one beamformer on one rendered setup and target speaker."""

    beamformer: str
    speaker: int
    snr_db: np.ndarray
    tdoa_error_s: np.ndarray
    transmissions: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.snr_db = np.asarray(self.snr_db, dtype=float)
        self.tdoa_error_s = np.asarray(self.tdoa_error_s, dtype=float)
        if np.any(self.tdoa_error_s < 0):
            raise ValueError("TDOA errors are absolute values")

    @property
    def ate_s(self) -> float:
        return float(np.mean(self.tdoa_error_s[1:])) if len(self.tdoa_error_s) > 1 else 0.0

    def rows(self) -> list[dict]:
        out = []
        for j, v in enumerate(self.snr_db):
            out.append(self._row(j + 1, "snr_db", v))
        for j, v in enumerate(self.tdoa_error_s):
            out.append(self._row(j + 1, "tdoa_err_s", v))
        return out

    def _row(self, node, metric, value):
        return {**self.meta, "beamformer": self.beamformer, "speaker": self.speaker + 1,
                "node": node, "metric": metric, "value": float(value)}


def aggregate_rows(results: Iterable[EvalResult], meta: dict) -> list[dict]:
    """Mean over repetitions and nodes, one row per (beamformer, speaker, metric).

    The TDOA aggregate excludes node 1 (its error is zero by construction),
    so it equals the mean ATE.
    """
    groups: dict[tuple, list[EvalResult]] = {}
    for r in results:
        groups.setdefault((r.beamformer, r.speaker), []).append(r)
    rows = []
    for (bf, spk), rs in groups.items():
        snr_mean = float(np.mean([r.snr_db for r in rs]))
        ate_mean = float(np.mean([r.ate_s for r in rs]))
        base = {**meta, "rep": "mean", "beamformer": bf, "speaker": spk + 1, "node": "mean"}
        rows.append({**base, "metric": "snr_db", "value": snr_mean})
        rows.append({**base, "metric": "tdoa_err_s", "value": ate_mean})
    return rows


def write_csv(rows: Iterable[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k, "")) for k in CSV_COLUMNS})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def format_costs(rows) -> str:
    """Plain-text table of :func:`dnbd.network.predict_costs` rows."""
    head = ("beamformer", "smoothing", "complexity", "value", "bandwidth", "reals", "ledger")
    body = [(r.beamformer, r.smoothing, r.complexity, str(r.complexity_value), r.bandwidth,
             str(r.bandwidth_value), "yes" if r.checkable else "no") for r in rows]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    lines = ["  ".join(x.ljust(w) for x, w in zip(line, widths)).rstrip() for line in [head, *body]]
    return "\n".join(lines)
