"""Command-line entry point: ``dss <verb> [options]``.

Verbs: kernel-dump, bench, grad-check, train, eig-report.  Exit codes are a
stable contract: 0 success, 2 configuration error, 3 numeric or singularity
error (including a failed gradient check), 4 training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .conv import BENCH_HEADER, benchmark
from .dssformer import BlockConfig, Encoder, EncoderConfig
from .errors import ConfigError, DivergenceError, DomainError, DssError, NumericError, PreconditionError, SingularRowError
from .kernel import DssParams, EigenvalueSet, InitScheme, compute_kernels, init_delta, init_eigenvalues, init_w, write_kernel_csv
from .training import EigenTrajectory, OptimizerConfig, ToyTaskSpec, grad_check, track_eigen_trajectories, train_toy, write_metrics

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_DIVERGED = 4

SPEC_VERSION = 1
GRAD_CHECK_THRESHOLD = 1e-4
SLOPE_HEADER = "layer,slope_im,mean_re"

_MODEL_EXTRA = {"n_blocks", "seed", "dtype"}
_OUTPUT_KEYS = {"metrics", "trajectory", "svg", "slopes"}
_GRAD_CHECK_KEYS = {"epsilon", "length", "seed"}


# ---------------------------------------------------------------------------
# configuration


@dataclasses.dataclass(frozen=True)
class RunConfig:
    model: EncoderConfig
    task: ToyTaskSpec
    optimizer: OptimizerConfig
    output: dict
    dtype: type
    grad_check: dict


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _section(raw: dict, name: str, allowed: set[str]) -> dict:
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be an object")
    unknown = sorted(set(sec) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    return dict(sec)


def parse_config(raw: dict, seed: int | None = None) -> RunConfig:
    """Validate a decoded JSON config; ``seed`` overrides the model and task seeds."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if raw.get("spec_version") != SPEC_VERSION:
        raise ConfigError(f'config needs "spec_version": {SPEC_VERSION}, got {raw.get("spec_version")!r}')
    unknown = sorted(set(raw) - {"spec_version", "model", "task", "optimizer", "output", "grad_check"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")

    model = _section(raw, "model", _fields(BlockConfig) | _MODEL_EXTRA)
    task = _section(raw, "task", _fields(ToyTaskSpec))
    opt = _section(raw, "optimizer", _fields(OptimizerConfig))
    output = _section(raw, "output", _OUTPUT_KEYS)
    check = _section(raw, "grad_check", _GRAD_CHECK_KEYS)

    dtype_name = model.pop("dtype", "float64")
    if dtype_name not in ("float32", "float64"):
        raise ConfigError(f"dtype must be float32 or float64, got {dtype_name!r}")
    n_blocks = model.pop("n_blocks", 1)
    model_seed = model.pop("seed", 0)
    if seed is not None:
        model_seed = seed
        task["seed"] = seed
    if "periods" in task:
        task["periods"] = tuple(task["periods"])
    try:
        task_spec = ToyTaskSpec(**task)
        enc = EncoderConfig(BlockConfig(**model), n_blocks=n_blocks, input_dim=task_spec.input_dim, seed=model_seed)
        optimizer = OptimizerConfig(**opt)
    except (DomainError, TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    return RunConfig(enc, task_spec, optimizer, output, np.dtype(dtype_name).type, check)


def load_config(path: str | None, seed: int | None = None) -> RunConfig:
    if path is None:
        return parse_config({"spec_version": SPEC_VERSION}, seed)
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from err
    return parse_config(raw, seed)


@contextmanager
def _open_out(path: str | None):
    if path is None or path == "-":
        yield sys.stdout
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            yield fh


# ---------------------------------------------------------------------------
# verbs


def _parse_eigenvalues(text: str) -> np.ndarray:
    try:
        return np.array([complex(v.strip().replace(" ", "")) for v in text.split(",") if v.strip()])
    except ValueError as err:
        raise ConfigError(f"cannot parse --eigenvalues {text!r}: {err}") from err


def cmd_kernel_dump(args) -> int:
    cfg = load_config(args.config, args.seed)
    seed = cfg.model.seed
    if args.eigenvalues:
        eig = EigenvalueSet.from_complex(_parse_eigenvalues(args.eigenvalues))
    else:
        scheme = args.scheme or cfg.model.block.init
        n_states = args.n_states or cfg.model.block.dss_states
        eig = init_eigenvalues(InitScheme(scheme, seed), n_states)
    rng = np.random.default_rng([seed, 4])
    w_re, w_im = init_w(1, len(eig), rng)
    if args.delta is not None:
        if not args.delta > 0:
            raise ConfigError(f"--delta must be positive, got {args.delta}")
        log_delta = np.array([math.log(args.delta)])
    else:
        log_delta = init_delta(1, rng)
    kernels = compute_kernels(DssParams(eig, w_re, w_im, log_delta, args.length))
    with _open_out(args.out) as fh:
        write_kernel_csv(fh, kernels)
    return EXIT_OK


def cmd_bench(args) -> int:
    lo, hi = args.min_length, args.max_length
    for v in (lo, hi):
        if v < 1 or v & (v - 1):
            raise ConfigError(f"bench lengths must be powers of two, got {v}")
    if lo > hi:
        raise ConfigError("--min-length exceeds --max-length")
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    unknown = set(methods) - {"naive", "fft"}
    if unknown or not methods:
        raise ConfigError(f"--methods takes naive and/or fft, got {args.methods!r}")
    lengths = [1 << k for k in range(lo.bit_length() - 1, hi.bit_length())]
    rows = benchmark(lengths, trials=args.trials, seed=args.seed or 0, methods=methods)
    with _open_out(args.out) as fh:
        fh.write(BENCH_HEADER + "\n")
        for r in rows:
            fh.write(f"{r['method']},{r['L']},{r['trials']},{r['median_ns']},{r['p90_ns']}\n")
    for method in dict.fromkeys(r["method"] for r in rows):
        med = [r["median_ns"] for r in rows if r["method"] == method]
        if len(med) > 1:
            print(f"{method}: last doubling ratio {med[-1] / med[-2]:.2f}", file=sys.stderr)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    cfg = load_config(args.config, args.seed)
    check = cfg.grad_check
    report = grad_check(
        cfg.model,
        seed=check.get("seed", cfg.model.seed),
        epsilon=check.get("epsilon", 5e-5),
        length=check.get("length", 16),
    )
    line = f"max_rel_error={report.max_rel_error:.3e} worst={report.worst()} coordinates={report.coordinates}"
    print(line)
    if args.out:
        with _open_out(args.out) as fh:
            json.dump({"max_rel_error": report.max_rel_error, "per_parameter": report.per_parameter}, fh, indent=1)
    if not report.max_rel_error <= GRAD_CHECK_THRESHOLD:
        print(f"gradient check failed: {report.max_rel_error:.3e} > {GRAD_CHECK_THRESHOLD:g}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    metrics = args.out or cfg.output.get("metrics", "metrics.ndjson")
    trajectory = cfg.output.get("trajectory", str(Path(metrics).with_suffix(".trajectory.csv")))

    def log(rec):
        print(json.dumps({k: rec[k] for k in ("epoch", "loss", "accuracy")}), file=sys.stderr)

    result = train_toy(cfg.task, cfg.model, cfg.optimizer, dtype=cfg.dtype, log=log)
    with _open_out(metrics) as fh:
        write_metrics(fh, result.history)
    if result.trajectory.steps:
        with _open_out(trajectory) as fh:
            result.trajectory.write_csv(fh)
    return EXIT_OK


def cmd_eig_report(args) -> int:
    cfg = load_config(args.config, args.seed)
    if args.trajectory_csv:
        try:
            traj = EigenTrajectory.read_csv(Path(args.trajectory_csv).read_text())
        except OSError as err:
            raise ConfigError(f"cannot read trajectory {args.trajectory_csv}: {err}") from err
    else:
        traj = track_eigen_trajectories(Encoder(cfg.model))
    rows = traj.final_summary()
    with _open_out(args.out or cfg.output.get("slopes")) as fh:
        fh.write(SLOPE_HEADER + "\n")
        for r in rows:
            fh.write(f"{r['layer']},{r['slope_im']!r},{r['mean_re']!r}\n")
    svg_path = args.svg_out or cfg.output.get("svg")
    if svg_path:
        with _open_out(svg_path) as fh:
            fh.write(render_svg(traj))
    return EXIT_OK


# ---------------------------------------------------------------------------
# SVG


def _scale(values, lo_px, hi_px):
    lo, hi = float(np.min(values)), float(np.max(values))
    span = hi - lo or 1.0
    return lambda v: lo_px + (float(v) - lo) / span * (hi_px - lo_px)


def render_svg(traj: EigenTrajectory, width: int = 360, height: int = 200) -> str:
    """Self-contained SVG: per layer, Im(lambda_n) and Re(lambda_n) against n.

    Each panel holds one polyline per snapshot, so a panel carries exactly one
    point per trajectory row of its layer.  Later snapshots are drawn darker.
    """
    if not traj.steps:
        raise DomainError("trajectory has no snapshots")
    layers, n = traj.re[0].shape
    pad = 30
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{2 * width}" height="{layers * height}" '
        f'viewBox="0 0 {2 * width} {layers * height}" font-family="monospace" font-size="10">'
    ]
    parts.append(f"<title>eigenvalue trajectories: {layers} layer(s), {len(traj.steps)} snapshot(s)</title>")
    re_all = np.stack(traj.re)
    im_all = np.stack(traj.im)
    sx = _scale([0, max(n - 1, 1)], pad, width - 10)
    for layer in range(layers):
        for col, (label, values) in enumerate((("Im", im_all[:, layer]), ("Re", re_all[:, layer]))):
            x0, y0 = col * width, layer * height
            sy = _scale(values, height - pad, 10)
            parts.append(f'<g class="panel" data-layer="{layer}" data-part="{label}" transform="translate({x0},{y0})">')
            parts.append(f'<rect x="{pad}" y="10" width="{width - pad - 10}" height="{height - pad - 10}" fill="none" stroke="#999"/>')
            parts.append(f'<text x="{pad}" y="{height - 8}">layer {layer}: {label}(lambda_n) vs n</text>')
            last = len(traj.steps) - 1
            for s, step in enumerate(traj.steps):
                shade = 200 - int(200 * s / last) if last else 0
                pts = " ".join(f"{sx(i):.2f},{sy(v):.2f}" for i, v in enumerate(values[s]))
                parts.append(
                    f'<polyline data-step="{step}" fill="none" stroke="rgb({shade},{shade},255)" points="{pts}"/>'
                )
            parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (spec_version 1)")
    common.add_argument("--seed", type=int, help="override model and task seeds")
    common.add_argument("--out", help="output path (default: stdout)")

    parser = argparse.ArgumentParser(prog="dss", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("kernel-dump", parents=[common], help="write a single-channel kernel as CSV")
    p.add_argument("--scheme", help="eigenvalue init scheme (default: model.init)")
    p.add_argument("--n-states", type=int, help="state size N (default: model.dss_states)")
    p.add_argument("--length", type=int, default=64)
    p.add_argument("--delta", type=float, help="sampling interval (default: random log-uniform draw)")
    p.add_argument("--eigenvalues", help="comma-separated complex eigenvalues, overriding --scheme")
    p.set_defaults(func=cmd_kernel_dump)

    p = sub.add_parser("bench", parents=[common], help="time naive vs FFT convolution")
    p.add_argument("--min-length", type=int, default=256)
    p.add_argument("--max-length", type=int, default=16384)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--methods", default="naive,fft")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference check of all gradients")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("train", parents=[common], help="train on a toy task")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eig-report", parents=[common], help="eigenvalue slope table and SVG")
    p.add_argument("--trajectory-csv", help="trajectory written by train (default: untrained model)")
    p.add_argument("--svg-out", help="SVG output path")
    p.set_defaults(func=cmd_eig_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (SingularRowError, NumericError, PreconditionError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DomainError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DssError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
