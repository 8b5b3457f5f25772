"""Command-line entry points: train, enhance, report, gradcheck, gen-corpus.

Exit codes: 0 success, 1 runtime failure (divergence, failed check,
checkpoint mismatch, I/O error), 2 unusable input (missing or invalid config,
bad WAV).
"""

from __future__ import annotations

import argparse
import os
import shutil
import statistics
import sys
import tempfile
import time

# Single-threaded BLAS unless the caller says otherwise: RTF figures stay
# comparable across machines and runs stay bit-reproducible. Only effective
# when numpy has not been imported yet (the console-script path).
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402

from . import checkpoint as ckpt
from . import config as config_mod
from .capture import export_attention
from .cost import count_params, estimate_flops
from .data import WavFormatError, read_wav, write_manifest, write_wav
from .gan import MetricDiscriminator
from .model import PRESETS, TridentNet
from .signal import SAMPLE_RATE, Waveform
from .train import LOG_FIELDS, Trainer, TrainingDiverged


class UsageError(Exception):
    """Bad input detected before any side effect (exit code 2)."""


def _load_config(path):
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    try:
        return config_mod.load(path)
    except config_mod.ConfigError as exc:
        raise UsageError(f"invalid config: {exc}") from None


def _build_model(cfg):
    return TridentNet(cfg.model, seed=cfg.seed)


# ---------------------------------------------------------------- train


def cmd_train(args):
    cfg = _load_config(args.config)
    tcfg = cfg.trainer if args.steps is None else cfg.trainer.replace(steps=args.steps)
    out_dir = args.out_dir or tcfg.out_dir
    if args.resume and not os.path.isfile(os.path.join(args.resume, "model.tse")):
        raise UsageError(f"no checkpoint to resume from in {args.resume}")

    noisy, clean = cfg.data.corpus(cfg.seed)
    model = _build_model(cfg)
    disc = MetricDiscriminator(seed=cfg.seed + 1)
    trainer = Trainer(model, disc, noisy, clean, tcfg, cfg.loss, seed=cfg.seed)
    if args.resume:
        trainer.resume(args.resume)

    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "train.log")
    fd, tmp_log = tempfile.mkstemp(dir=out_dir, prefix=".tmp-", suffix="train.log")
    try:
        with os.fdopen(fd, "w") as log_fh:
            log_fh.write(" ".join(LOG_FIELDS) + "\n")

            def log(line):
                log_fh.write(line + "\n")
                if not args.quiet:
                    print(line, flush=True)

            def on_step(tr):
                if tcfg.checkpoint_every and tr.step % tcfg.checkpoint_every == 0:
                    tr.save(out_dir)

            trainer.run(log=log, on_step=on_step)
        trainer.save(out_dir)
        os.chmod(tmp_log, ckpt.default_file_mode())
        os.replace(tmp_log, log_path)
    except BaseException:
        if os.path.exists(tmp_log):
            os.unlink(tmp_log)
        raise
    print(f"trained {trainer.step} steps; checkpoint in {out_dir}")
    return 0


# ---------------------------------------------------------------- enhance


def cmd_enhance(args):
    cfg = _load_config(args.config)
    if not os.path.isfile(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    try:
        wav = read_wav(args.input)
    except FileNotFoundError:
        raise UsageError(f"input WAV not found: {args.input}") from None
    except WavFormatError as exc:
        raise UsageError(str(exc)) from None
    model = _build_model(cfg)
    model.load_state_dict(ckpt.load(args.checkpoint))
    model.eval()

    out = model(wav.samples[None], capture=bool(args.export_attention))
    enhanced = out.wave.data[0].astype(np.float64)

    out_dir = os.path.dirname(os.path.abspath(args.output))
    fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=".tmp-", suffix=".wav")
    os.close(fd)
    written = []
    try:
        write_wav(tmp, enhanced)
        if args.export_attention:
            written = export_attention(out.capture, args.export_attention)
        os.chmod(tmp, ckpt.default_file_mode())
        os.replace(tmp, args.output)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        for csv in written:
            for path in (csv, csv[:-4] + ".pgm"):
                if os.path.exists(path):
                    os.unlink(path)
        raise
    print(f"wrote {args.output} ({len(enhanced)} samples)")
    if written:
        print(f"wrote {len(written)} attention maps to {args.export_attention}")
    return 0


# ---------------------------------------------------------------- report


def measure_rtf(model, seconds=3.0, runs=5, seed=0):
    """Median wall time of one inference forward on ``seconds`` of noise, divided by ``seconds``."""
    x = np.random.default_rng(seed).normal(0.0, 0.1, size=(1, int(round(seconds * SAMPLE_RATE))))
    model.train()
    model(x)  # batch-norm statistics
    model.eval()
    model(x)  # builds cached positional tables
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        model(x)
        times.append(time.perf_counter() - t0)
    return statistics.median(times) / seconds


def cmd_report(args):
    rows = []
    for name in args.preset or []:
        if name not in PRESETS:
            raise UsageError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        rows.append((name, PRESETS[name], 0))
    for path in args.configs:
        cfg = _load_config(path)
        rows.append((os.path.basename(path), cfg.model, cfg.seed))
    if not rows:
        raise UsageError("give at least one config file or --preset")
    print(f"{'config':<16}{'params':>12}{'FLOPs (G)':>12}{'RTF':>10}")
    for name, mcfg, seed in rows:
        params = count_params(mcfg)
        flops = estimate_flops(mcfg, args.seconds) / 1e9
        if args.runs > 0:
            rtf = f"{measure_rtf(TridentNet(mcfg, seed=seed), args.seconds, args.runs):.3f}"
        else:
            rtf = "-"
        print(f"{name:<16}{params:>12,}{flops:>12.2f}{rtf:>10}", flush=True)
    return 0


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args):
    from .gradcheck import run_suite

    results = run_suite(seed=args.seed, max_coords=args.max_coords, include_block=not args.skip_block)
    failed = 0
    for name, r in results.items():
        ok = r.max_rel_err < args.tolerance
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name:<28} max_rel_err={r.max_rel_err:.2e} "
              f"checked={r.n_checked} excluded={len(r.excluded)}")
    print(f"{len(results) - failed}/{len(results)} checks below {args.tolerance:g}")
    return 1 if failed else 0


# ---------------------------------------------------------------- gen-corpus


def cmd_gen_corpus(args):
    cfg = _load_config(args.config)
    out = os.path.abspath(args.out_dir)
    if os.path.exists(out) and os.listdir(out):
        raise UsageError(f"output directory is not empty: {out}")
    specs = cfg.data.specs(cfg.seed)
    parent = os.path.dirname(out)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(dir=parent, prefix=".tmp-corpus-")
    try:
        os.makedirs(os.path.join(tmp, "noisy"))
        os.makedirs(os.path.join(tmp, "clean"))
        write_manifest(os.path.join(tmp, "manifest.txt"), specs)
        for i, spec in enumerate(specs):
            noisy, clean, _ = spec.realize()
            write_wav(os.path.join(tmp, "noisy", f"{i:04d}.wav"), Waveform(noisy))
            write_wav(os.path.join(tmp, "clean", f"{i:04d}.wav"), Waveform(clean))
        os.chmod(tmp, 0o777 & ckpt.default_file_mode() | 0o111)
        if os.path.exists(out):
            os.rmdir(out)
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(f"wrote {len(specs)} pairs and manifest.txt to {out}")
    return 0


# ---------------------------------------------------------------- main


def build_parser():
    p = argparse.ArgumentParser(prog="trident", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("config", help="TOML run configuration")
    t.add_argument("--out-dir", help="override [trainer] out_dir")
    t.add_argument("--steps", type=int, help="override [trainer] steps")
    t.add_argument("--resume", metavar="DIR", help="continue from model.tse/train_state.tse in DIR")
    t.add_argument("--quiet", action="store_true", help="do not echo log lines")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("enhance", help="enhance a 16 kHz mono WAV")
    e.add_argument("--config", required=True, help="config the checkpoint was trained with")
    e.add_argument("--checkpoint", required=True, help="model.tse")
    e.add_argument("input", help="noisy WAV")
    e.add_argument("output", help="enhanced WAV to write")
    e.add_argument("--export-attention", metavar="DIR", help="write In-CA maps as CSV + PGM")
    e.set_defaults(func=cmd_enhance)

    r = sub.add_parser("report", help="parameter count, FLOPs and real-time factor")
    r.add_argument("configs", nargs="*", help="TOML run configurations")
    r.add_argument("--preset", action="append", help=f"built-in model ({', '.join(PRESETS)}); repeatable")
    r.add_argument("--seconds", type=float, default=3.0, help="input length for FLOPs and RTF")
    r.add_argument("--runs", type=int, default=5, help="timed forward passes for RTF (0 skips RTF)")
    r.set_defaults(func=cmd_report)

    g = sub.add_parser("gradcheck", help="finite-difference check of every primitive and a toy block")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--max-coords", type=int, default=24, help="coordinates sampled per input")
    g.add_argument("--skip-block", action="store_true", help="primitives only")
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("gen-corpus", help="write manifest and noisy/clean WAVs")
    c.add_argument("config", help="TOML run configuration ([data] section)")
    c.add_argument("out_dir")
    c.set_defaults(func=cmd_gen_corpus)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, ckpt.CheckpointError, KeyError, ValueError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
