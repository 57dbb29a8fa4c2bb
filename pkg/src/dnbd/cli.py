"""Command-line entry point: ``dnbd run|verify|costs|render``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .experiment import CONFIG_ENV, ExperimentSpec, resolve_config, run_experiment
from .metrics import format_costs
from .network import predict_costs
from .scene import load_scene, render_scene, synthetic_babble, synthetic_speech
from .stft import write_wav
from .verify import verify

EPILOG = f"""\
Config files are looked up as given, then in ${CONFIG_ENV} (if set), then in
the configs shipped with the package (scene_default.yaml, smoke.yaml,
positional_sweep.yaml, vad_sweep.yaml, t60_sweep.yaml).
"""


def _cmd_run(args) -> int:
    spec = ExperimentSpec.load(args.spec)
    overrides = {k: v for k, v in (("seed", args.seed), ("repetitions", args.repetitions)) if v is not None}
    if overrides:
        spec = dataclasses.replace(spec, **overrides)
    outcome = run_experiment(spec, out_dir=args.out, workers=args.workers)
    summary = outcome.summary()
    for (t60, r, R, bf, spk), v in sorted(summary.items()):
        print(f"t60={t60:g} r={r:g} R={R:g} speaker={spk} {bf:<10} SNR {v:7.2f} dB")
    print(f"wrote {outcome.csv_path} and {outcome.dat_path}")
    if outcome.failures:
        print(f"{len(outcome.failures)} repetition(s) failed", file=sys.stderr)
        return 1
    return 0


def _cmd_verify(args) -> int:
    report = verify("full" if args.full else "quick", echo=print)
    print("all checks passed" if report.ok else "verification FAILED")
    return 0 if report.ok else 1


def _cmd_costs(args) -> int:
    print(format_costs(predict_costs(args.J, args.N, args.S, args.mode)))
    return 0


def _cmd_render(args) -> int:
    path = resolve_config(args.scene)
    spec = load_scene(path)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    fs = spec.sample_rate_hz
    n = int(round(args.duration * fs))
    rng = np.random.default_rng(spec.seed)
    speech = [synthetic_speech(n, fs, rng) for _ in spec.speakers]
    noise = [synthetic_babble(n, fs, rng) for _ in spec.noise_sources]
    mix, truth = render_scene(spec, speech, noise)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    peak = max(np.max(np.abs(mix)), 1e-12)
    write_wav(out / "mixture.wav", mix / peak * 0.9, fs, pcm16=False)
    for k, img in enumerate(truth.speech_images):
        write_wav(out / f"speaker{k + 1}.wav", img / peak * 0.9, fs, pcm16=False)
    np.savetxt(out / "vad.txt", truth.vad.astype(int), fmt="%d", header="frame-wise VAD, one column per node")
    print(f"{mix.shape[1]} microphones in {len(spec.nodes)} nodes, {n} samples at {fs} Hz -> {out}")
    for k in range(truth.tdoa.shape[1]):
        tdoa = ", ".join(f"{1e3 * t:+.3f}" for t in truth.tdoa[:, k])
        print(f"speaker {k + 1} TDOA to node 1 (ms): {tdoa}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dnbd", description="Distributed node-specific block-diagonal "
                                "beamforming simulator.", epilog=EPILOG,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress and diagnostics")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment sweep from a YAML spec", epilog=EPILOG,
                         formatter_class=argparse.RawDescriptionHelpFormatter)
    run.add_argument("spec", help="experiment YAML (e.g. positional_sweep.yaml)")
    run.add_argument("--seed", type=int, help="override the experiment seed")
    run.add_argument("--repetitions", type=int, help="override repetitions per sweep point")
    run.add_argument("--out", help="output directory (default: output_dir of the config)")
    run.add_argument("--workers", type=int, default=1, help="worker processes (default 1)")
    run.set_defaults(func=_cmd_run)

    ver = sub.add_parser("verify", help="run the oracle self-checks")
    ver.add_argument("--full", action="store_true", help="complete sizes plus invariant suites")
    ver.set_defaults(func=_cmd_verify)

    costs = sub.add_parser("costs", help="print per-frame complexity and bandwidth")
    costs.add_argument("--J", type=int, default=4, help="number of nodes")
    costs.add_argument("--N", type=int, default=6, help="microphones per node")
    costs.add_argument("--S", type=int, default=2, help="number of sources")
    costs.add_argument("--mode", choices=["recursive", "nonrecursive"], help="smoothing scheme filter")
    costs.set_defaults(func=_cmd_costs)

    ren = sub.add_parser("render", help="render a scene to multichannel WAV files", epilog=EPILOG,
                         formatter_class=argparse.RawDescriptionHelpFormatter)
    ren.add_argument("scene", help="scene YAML (e.g. scene_default.yaml)")
    ren.add_argument("--seed", type=int, help="override the scene seed")
    ren.add_argument("--duration", type=float, default=5.0, help="seconds of synthetic audio")
    ren.add_argument("--out", default="render", help="output directory")
    ren.set_defaults(func=_cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
