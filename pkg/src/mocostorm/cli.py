"""Command-line entry point.

Every subcommand accepts ``--config FILE.json``; explicit flags override the
file, which overrides the defaults. The effective configuration is echoed to
``config.json`` in the output directory. Errors are reported as a single JSON
line on stderr with a nonzero exit code.

The number of BLAS/OpenMP threads comes from ``MOCOSTORM_THREADS`` (default:
library default, i.e. all cores). ``MOCOSTORM_THREADS=1`` makes runs
bit-reproducible.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
import time
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import BaselineConfig, DivergenceError, xdgrasp
from .benchmark import PRESETS, simulate
from .checks import gradient_errors, nudft_adjoint_errors, warp_adjoint_errors
from .engine import NonFiniteLossError, ReconConfig, estimate_motion, progressive_solve
from .io import FormatError, load_arrays, load_checkpoint, read_container, save_arrays, save_checkpoint, write_container
from .metrics import Estimate, best_phase_psnr, compute_metrics, latent_correlation
from .phantom import PhantomSpec

THREADS_ENV = "MOCOSTORM_THREADS"
EXIT_USAGE, EXIT_IO, EXIT_FORMAT, EXIT_NUMERIC, EXIT_CHECK = 2, 3, 4, 5, 6

log = logging.getLogger("mocostorm")


class CliError(Exception):
    def __init__(self, kind, message, code):
        super().__init__(message)
        self.kind, self.code = kind, code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, EXIT_USAGE)


# -- configuration -----------------------------------------------------------

def _flag(name):
    return "--" + name.replace("_", "-")


def _config_fields(cls, skip=()):
    return [f for f in dataclasses.fields(cls) if f.name not in skip]


def _add_config_flags(parser, cls, skip=()):
    group = parser.add_argument_group(f"{cls.__name__} fields")
    for f in _config_fields(cls, skip):
        default = cls().__getattribute__(f.name)
        kind = float if default is None else type(default)
        if kind is bool:
            group.add_argument(_flag(f.name), dest=f"cfg_{f.name}", type=lambda s: s.lower() in ("1", "true", "yes"))
        else:
            group.add_argument(_flag(f.name), dest=f"cfg_{f.name}", type=kind, metavar=kind.__name__.upper())


def _read_json(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError("missing_file", f"config file {p} not found", EXIT_IO)
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise CliError("bad_config", f"{p}: {err}", EXIT_FORMAT) from err


def _build(cls, args, file_values: dict, skip=()):
    """Defaults, then ``file_values``, then explicit flags."""
    names = {f.name for f in _config_fields(cls, skip)}
    unknown = set(file_values) - names
    if unknown:
        raise CliError("bad_config", f"unknown {cls.__name__} keys: {sorted(unknown)}", EXIT_USAGE)
    values = dict(file_values)
    for name in names:
        v = getattr(args, f"cfg_{name}", None)
        if v is not None:
            values[name] = v
    try:
        return cls(**values)
    except TypeError as err:
        raise CliError("bad_config", str(err), EXIT_USAGE) from err


def _echo(out: Path, command: str, **sections):
    payload = {"command": command, "version": __version__, **sections}
    (out / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError("missing_file", f"{p} not found", EXIT_IO)
    return p


def _load_container(path):
    return read_container(_need_file(path))


# -- emission ----------------------------------------------------------------

def write_png(path, image):
    """8-bit grayscale magnitude, normalized to the image maximum."""
    from PIL import Image

    mag = np.abs(np.asarray(image))
    peak = mag.max()
    scaled = np.zeros(mag.shape) if peak == 0 else mag / peak
    Image.fromarray(np.round(255 * scaled).astype(np.uint8), mode="L").save(path)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _quiver_rows(field, stride):
    H, W = field.shape[1:]
    for i in range(0, H, stride):
        for j in range(0, W, stride):
            yield i, j, field[0, i, j], field[1, i, j]


def _motion_magnitude(field):
    return np.sqrt((field ** 2).sum(axis=0))


# -- subcommands -------------------------------------------------------------

def cmd_simulate(args):
    out = _outdir(args.out)
    base = PRESETS[args.preset]
    file_cfg = _read_json(args.config)
    snr = file_cfg.pop("snr_db", base["snr_db"])
    spec = _build(PhantomSpec, args, {**base["spec"].to_dict(), **file_cfg})
    if args.snr_db is not None:
        snr = args.snr_db
    if args.cfg_noise_sigma is not None or "noise_sigma" in file_cfg:
        snr = None
    try:
        spec.validate()
    except ValueError as err:
        raise CliError("bad_config", str(err), EXIT_USAGE) from err
    spec, gt, dataset = simulate(spec, snr, args.ordering)
    meta = {"phantom": spec.to_dict(), "snr_db": snr, "ordering": args.ordering}
    write_container(out / "data.mcsd", dataset, gt, meta)
    write_csv(out / "respiratory.csv", ["frame_index", "r_t"], enumerate(gt.respiratory_signal))
    write_png(out / "template.png", gt.template)
    peak = int(np.argmax(gt.respiratory_signal))
    write_png(out / "motion_peak.png", _motion_magnitude(gt.motion[peak]))
    _echo(out, "simulate", phantom=spec.to_dict(), snr_db=snr, ordering=args.ordering, preset=args.preset)
    print(f"wrote {out / 'data.mcsd'} ({dataset.num_frames} frames, sigma={spec.noise_sigma:.4g})")


def _recon_config(args):
    return _build(ReconConfig, args, _read_json(args.config))


def _run_recon(dataset, config, out: Path | None, state=None, every=1):
    loss_log = None
    if out is not None:
        loss_log = open(out / "loss.csv", "a" if state is not None else "w", newline="")
        if state is None:
            loss_log.write("stage,epoch,loss\n")

    def callback(st):
        if loss_log is not None and st.loss_history and st.epoch > 0:
            stage, loss = st.loss_history[-1]
            loss_log.write(f"{stage},{st.epoch},{float(loss)!r}\n")
            loss_log.flush()
        if out is not None and every and st.epoch % every == 0:
            save_checkpoint(out / "checkpoint.mcck", st, config)

    t0 = time.perf_counter()
    with loss_log or nullcontext():
        state = progressive_solve(dataset, config, state=state, callback=callback,
                                  dump_path=None if out is None else out / "crash.mcck")
    return state, time.perf_counter() - t0


def cmd_reconstruct(args):
    out = _outdir(args.out)
    dataset, _, _ = _load_container(args.data)
    state = None
    if args.resume:
        state, config = load_checkpoint(_need_file(args.resume))
        overrides = {f.name: getattr(args, f"cfg_{f.name}") for f in _config_fields(ReconConfig)
                     if getattr(args, f"cfg_{f.name}") is not None}
        config = replace(config, **overrides)
    else:
        config = _recon_config(args)
    try:
        config.validate()
    except ValueError as err:
        raise CliError("bad_config", str(err), EXIT_USAGE) from err
    _echo(out, "reconstruct", recon=config.to_dict(), data=str(args.data), resume=args.resume)
    state, runtime = _run_recon(dataset, config, out, state, args.checkpoint_every)
    save_checkpoint(out / "checkpoint.mcck", state, config)

    motion = estimate_motion(state, dataset.shape)
    z = state.Z
    write_csv(out / "latent.csv", ["frame_index"] + [f"z{i}" for i in range(z.shape[1])],
              ([t, *row] for t, row in enumerate(z)))
    write_png(out / "template.png", state.f)
    lead = z[:, 0]
    frames = args.quiver_frames or [int(np.argmin(lead)), int(np.argmax(lead))]
    for t in frames:
        if not 0 <= t < dataset.num_frames:
            raise CliError("bad_argument", f"quiver frame {t} out of range", EXIT_USAGE)
        write_csv(out / f"quiver_{t:04d}.csv", ["row", "col", "d_row", "d_col"],
                  _quiver_rows(motion[t], args.quiver_stride))
    summary = {"runtime": runtime, "final_loss": state.loss_history[-1][1], "config_digest": config.digest()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"final loss {summary['final_loss']:.6g} after {runtime:.1f} s")


def cmd_baseline(args):
    out = _outdir(args.out)
    dataset, _, _ = _load_container(args.data)
    config = _build(BaselineConfig, args, _read_json(args.config), skip=("extra",))
    if config.num_phases < 2:
        raise CliError("bad_config", "num_phases must be >= 2", EXIT_USAGE)
    _echo(out, "baseline", baseline=dataclasses.asdict(config), data=str(args.data))
    t0 = time.perf_counter()
    gating, bins = xdgrasp(dataset, config)
    runtime = time.perf_counter() - t0
    spf = dataset.spokes_per_frame
    write_csv(out / "gating.csv", ["spoke_index", "frame_index", "gating"],
              ((s, s // spf, v) for s, v in enumerate(gating.values)))
    write_csv(out / "bins.csv", ["phase", "num_spokes", "mean_gating"],
              ((b.phase_index, len(b.spoke_indices), gating.values[b.spoke_indices].mean()) for b in bins))
    arrays = {"phases": np.stack([b.recon for b in bins]), "gating": gating.values}
    for b in bins:
        arrays[f"bin_{b.phase_index}"] = np.asarray(b.spoke_indices, dtype=np.int64)
        write_png(out / f"phase_{b.phase_index}.png", b.recon)
    save_arrays(out / "phases.mcck", arrays, {"kind": "xdgrasp", "spokes_per_frame": spf,
                                              "num_phases": len(bins), "runtime": runtime})
    print(f"reconstructed {len(bins)} phases in {runtime:.1f} s")


def cmd_adjointcheck(args):
    a = nudft_adjoint_errors(args.trials, args.seed).max()
    w = warp_adjoint_errors(args.trials, args.seed).max()
    print(f"nudft max relative error {a:.3e}")
    print(f"warp max relative error {w:.3e}")
    if not (a < 1e-10 and w < 1e-12):
        raise CliError("check_failed", f"adjoint mismatch nudft={a:.3e} warp={w:.3e}", EXIT_CHECK)


def cmd_gradcheck(args):
    e = gradient_errors(args.directions, args.seed).max()
    print(f"gradient max relative error {e:.3e}")
    if not e < args.tol:
        raise CliError("check_failed", f"gradient mismatch {e:.3e}", EXIT_CHECK)


def _estimate_from_args(args, shape):
    if args.checkpoint:
        state, _ = load_checkpoint(_need_file(args.checkpoint))
        if state.f.shape != tuple(shape):
            raise CliError("shape_mismatch", f"checkpoint grid {state.f.shape} vs data {tuple(shape)}", EXIT_FORMAT)
        runtime = args.runtime
        summary = Path(args.checkpoint).with_name("summary.json")
        if runtime is None and summary.is_file():
            runtime = json.loads(summary.read_text()).get("runtime")
        return Estimate(state.f, estimate_motion(state, shape), state.Z,
                        math.nan if runtime is None else runtime)
    _, other, _ = _load_container(args.estimate_container)
    if other is None or other.template is None or other.motion is None or other.respiratory_signal is None:
        raise CliError("missing_section", "estimate container lacks ground-truth sections", EXIT_FORMAT)
    return Estimate(other.template, other.motion, other.respiratory_signal[:, None],
                    0.0 if args.runtime is None else args.runtime)


def cmd_metrics(args):
    out = _outdir(args.out)
    dataset, truth, _ = _load_container(args.data)
    if truth is None or truth.template is None or truth.motion is None or truth.respiratory_signal is None:
        raise CliError("missing_section", f"{args.data} has no ground-truth sections", EXIT_FORMAT)
    if not (args.checkpoint or args.estimate_container):
        raise CliError("usage", "give --checkpoint or --estimate-container", EXIT_USAGE)
    m = compute_metrics(_estimate_from_args(args, dataset.shape), truth).to_dict()
    if args.baseline:
        arrays, fields = load_arrays(_need_file(args.baseline))
        bins = [arrays[f"bin_{k}"] for k in range(fields["num_phases"])]
        m["psnr_baseline"], m["baseline_phase"], m["baseline_frame"] = best_phase_psnr(
            arrays["phases"], bins, truth, fields["spokes_per_frame"])
    write_csv(out / "metrics.csv", list(m), [list(m.values())])
    _echo(out, "metrics", data=str(args.data), checkpoint=args.checkpoint,
          estimate_container=args.estimate_container, baseline=args.baseline)
    for k, v in m.items():
        print(f"{k} {v}")


def cmd_sweep_lambda(args):
    out = _outdir(args.out)
    dataset, truth, _ = _load_container(args.data)
    if truth is None or truth.respiratory_signal is None:
        raise CliError("missing_section", f"{args.data} has no respiratory signal", EXIT_FORMAT)
    config = _recon_config(args)
    _echo(out, "sweep-lambda", recon=config.to_dict(), lambdas=args.lambdas, data=str(args.data))
    rows = []
    for lam in args.lambdas:
        cfg = replace(config, lambda_smooth=lam).validate()
        state, runtime = _run_recon(dataset, cfg, None)
        corr = latent_correlation(state.Z, truth.respiratory_signal)
        rows.append((lam, corr, state.loss_history[-1][1], runtime))
        print(f"lambda {lam:g} latent_corr {corr:.4f}")
    write_csv(out / "sweep.csv", ["lambda", "latent_corr", "final_loss", "runtime"], rows)


# -- parser ------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="mocostorm", description="Motion-compensated reconstruction from free-breathing radial data.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate a phantom acquisition into a container")
    s.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--snr-db", type=float)
    s.add_argument("--ordering", choices=["golden_angle", "bit_reversed", "uniform"], default="golden_angle")
    _add_config_flags(s, PhantomSpec)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("reconstruct", help="motion-compensated progressive solve")
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--config")
    r.add_argument("--resume", help="continue from a checkpoint")
    r.add_argument("--checkpoint-every", type=int, default=1, help="epochs between checkpoints (0: final only)")
    r.add_argument("--quiver-frames", type=int, nargs="*")
    r.add_argument("--quiver-stride", type=int, default=4)
    _add_config_flags(r, ReconConfig)
    r.set_defaults(func=cmd_reconstruct)

    b = sub.add_parser("baseline", help="motion-resolved (binned) TV reconstruction")
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--config")
    _add_config_flags(b, BaselineConfig, skip=("extra",))
    b.set_defaults(func=cmd_baseline)

    g = sub.add_parser("gradcheck", help="directional derivatives vs finite differences")
    g.add_argument("--directions", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("adjointcheck", help="dot-product tests of the NUDFT and warp")
    a.add_argument("--trials", type=int, default=50)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_adjointcheck)

    m = sub.add_parser("metrics", help="score an estimate against a container's ground truth")
    m.add_argument("--data", required=True)
    m.add_argument("--out", required=True)
    src = m.add_mutually_exclusive_group()
    src.add_argument("--checkpoint")
    src.add_argument("--estimate-container", help="use another container's ground-truth sections as the estimate")
    m.add_argument("--baseline", help="phases file written by the baseline subcommand")
    m.add_argument("--runtime", type=float)
    m.set_defaults(func=cmd_metrics)

    w = sub.add_parser("sweep-lambda", help="latent correlation across smoothness weights")
    w.add_argument("--data", required=True)
    w.add_argument("--out", required=True)
    w.add_argument("--config")
    w.add_argument("--lambdas", type=float, nargs="+", default=[0.0, 0.1, 1.0, 10.0])
    _add_config_flags(w, ReconConfig, skip=("lambda_smooth",))
    w.set_defaults(func=cmd_sweep_lambda)
    return p


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise CliError("bad_environment", f"{THREADS_ENV} must be a positive integer, got {raw!r}", EXIT_USAGE)
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _fail(err: CliError) -> int:
    print(json.dumps({"error": err.kind, "message": str(err)}), file=sys.stderr)
    return err.code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with _thread_limit():
            args.func(args)
    except CliError as err:
        return _fail(err)
    except FormatError as err:
        return _fail(CliError("format", str(err), EXIT_FORMAT))
    except (NonFiniteLossError, DivergenceError) as err:
        return _fail(CliError("numeric", str(err), EXIT_NUMERIC))
    except OSError as err:
        return _fail(CliError("io", str(err), EXIT_IO))
    except ValueError as err:
        return _fail(CliError("invalid", str(err), EXIT_USAGE))
    return 0


if __name__ == "__main__":
    sys.exit(main())
