"""Command-line front end.

Subcommands: synth (test sequences), make-noisy (seeded Gaussian noise),
denoise (single inner solve), learn (bilevel parameter search), report
(result tables). Every run writes the fully resolved configuration as
JSON next to its outputs so experiments can be replayed exactly.

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

from .bilevel import OuterConfig, learn
from .metrics import psnr
from .pdhgm import DivergenceError, SolverConfig, pdhgm_solve, split_components
from .regularizers import MODEL_KINDS, ModelSpec, ParamVector
from .sensitivity import KrylovError
from .video_io import (
    NoiseSpec,
    PgmError,
    SYNTH_KINDS,
    VvolError,
    add_noise,
    export_pgm_sequence,
    read_vvol,
    synth_sequence,
    write_vvol,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_SOLVER = 3


class UsageError(ValueError):
    """Command-line level misuse that argparse cannot catch."""


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; we reserve 2 for I/O."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(path, payload):
    with open(path, "w", encoding="ascii") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _config_path(output):
    base, _ = os.path.splitext(output)
    return base + ".config.json"


def cmd_synth(args):
    video = synth_sequence(args.kind, args.w, args.h, args.t)
    write_vvol(args.output, video)
    _write_json(_config_path(args.output), {
        "command": "synth", "kind": args.kind, "w": args.w, "h": args.h,
        "t": args.t, "seed": 0, "output": args.output,
    })
    return EXIT_OK


def cmd_make_noisy(args):
    video = read_vvol(args.input)
    noisy = add_noise(video, NoiseSpec(var=args.var, seed=args.seed))
    write_vvol(args.output, noisy)
    _write_json(_config_path(args.output), {
        "command": "make-noisy", "input": args.input, "output": args.output,
        "var": args.var, "seed": args.seed,
    })
    return EXIT_OK


def _model_and_params(args):
    model = ModelSpec(args.model)
    if model.is_ic:
        if args.kappa is None:
            raise UsageError(f"model {args.model} requires --kappa")
        params = ParamVector(args.a1, args.a2, args.kappa)
    else:
        if args.kappa is not None:
            raise UsageError(f"model {args.model} takes no --kappa")
        params = ParamVector(args.a1, args.a2)
    model.validate_params(params)
    return model, params


def cmd_denoise(args):
    model, params = _model_and_params(args)
    noisy = read_vvol(args.input)
    config = SolverConfig(iterations=args.iters)
    u, w, _ = pdhgm_solve(model, noisy, params, config)
    os.makedirs(args.outdir, exist_ok=True)
    write_vvol(os.path.join(args.outdir, "u.vvol"), u)
    if model.is_ic:
        temporal, spatial = split_components(u, w, params.kappa)
        write_vvol(os.path.join(args.outdir, "w.vvol"), w)
        write_vvol(os.path.join(args.outdir, "temporal.vvol"), temporal)
        write_vvol(os.path.join(args.outdir, "spatial.vvol"), spatial)
    export_pgm_sequence(u, os.path.join(args.outdir, "preview_u"))
    _write_json(os.path.join(args.outdir, "config.json"), {
        "command": "denoise", "input": args.input, "outdir": args.outdir,
        "model": args.model, "a1": args.a1, "a2": args.a2,
        "kappa": args.kappa, "iters": args.iters,
    })
    return EXIT_OK


def _load_outer_config(args, model):
    overrides = {}
    if args.config is not None:
        with open(args.config, "r", encoding="ascii") as fh:
            overrides = json.load(fh)
        unknown = set(overrides) - {f.name for f in dataclasses.fields(OuterConfig)}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        for key in ("alpha_box", "kappa_box", "kappa_init", "sample_means"):
            if key in overrides and overrides[key] is not None:
                overrides[key] = tuple(overrides[key])
    config = OuterConfig(**overrides)
    if args.starts is not None:
        config.starts = args.starts
    if args.seed is not None:
        config.seed = args.seed
    return config


def _trace_rows(traces):
    for start_idx, trace in enumerate(traces):
        if not trace.params:
            yield [start_idx, 0, *trace.start_params, "", "", trace.status]
            continue
        for it, (pv, fv) in enumerate(zip(trace.params, trace.objectives)):
            step = trace.step_lengths[it - 1] if it >= 1 else ""
            yield [start_idx, it, *pv, fv, step, trace.status]


def cmd_learn(args):
    model = ModelSpec(args.model)
    noisy = read_vvol(args.input)
    truth = read_vvol(args.truth)
    config = _load_outer_config(args, model)
    result = learn(model, noisy, truth, config)

    os.makedirs(args.outdir, exist_ok=True)
    write_vvol(os.path.join(args.outdir, "u.vvol"), result.u)
    if model.is_ic:
        temporal, spatial = split_components(result.u, result.w, result.params_raw.kappa)
        write_vvol(os.path.join(args.outdir, "w.vvol"), result.w)
        write_vvol(os.path.join(args.outdir, "temporal.vvol"), temporal)
        write_vvol(os.path.join(args.outdir, "spatial.vvol"), spatial)

    config_dict = dataclasses.asdict(config)
    _write_json(os.path.join(args.outdir, "config.json"), {
        "command": "learn", "input": args.input, "truth": args.truth,
        "outdir": args.outdir, "model": args.model, "config": config_dict,
    })
    _write_json(os.path.join(args.outdir, "result.json"), {
        "model": result.model_kind,
        "params": list(result.params.as_array()),
        "params_raw": list(result.params_raw.as_array()),
        "converted": result.converted,
        "opt_value": result.opt_value,
        "psnr": result.psnr,
        "ssim": result.ssim,
        "seed": result.seed,
        "selected_start": result.selected_start,
        "failed_starts": result.failed_starts,
        "noisy_psnr": psnr(noisy, truth),
        "traces": [dataclasses.asdict(t) for t in result.traces],
    })
    if model.is_ic:
        header = ["start", "iteration", "alpha1", "alpha2", "kappa",
                  "objective", "step", "status"]
    else:
        header = ["start", "iteration", "alpha1", "alpha2",
                  "objective", "step", "status"]
    with open(os.path.join(args.outdir, "trace.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in _trace_rows(result.traces):
            writer.writerow(row)
    return EXIT_OK


def _format_row(doc):
    params = doc["params"]
    body = ", ".join(f"{v:.3g}" for v in params)
    star = "*" if doc.get("converted") else ""
    return [doc["model"], f"({body}){star}", f"{doc['opt_value']:.4g}",
            f"{doc['psnr']:.4g}", f"{doc['ssim']:.4g}"]


def cmd_report(args):
    rows = []
    bad = 0
    for path in args.results:
        try:
            with open(path, "r", encoding="ascii") as fh:
                doc = json.load(fh)
            rows.append(_format_row(doc))
        except (OSError, ValueError, KeyError) as exc:
            print(f"{path}: unreadable result ({exc})", file=sys.stderr)
            bad += 1
    header = ["model", "(a1, a2, kappa)", "opt value", "psnr", "ssim"]
    widths = [max(len(header[i]), *(len(r[i]) for r in rows)) if rows else len(header[i])
              for i in range(len(header))]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for row in rows:
        print("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    if args.csv is not None:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
    return EXIT_IO if bad else EXIT_OK


def _build_parser():
    parser = _Parser(prog="icvideo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic test sequence")
    p.add_argument("output")
    p.add_argument("--kind", choices=SYNTH_KINDS, required=True)
    p.add_argument("--w", type=int, required=True)
    p.add_argument("--h", type=int, required=True)
    p.add_argument("--t", type=int, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("make-noisy", help="add seeded Gaussian noise to a volume")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--var", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_noisy)

    p = sub.add_parser("denoise", help="run the inner solver at fixed parameters")
    p.add_argument("input")
    p.add_argument("outdir")
    p.add_argument("--model", choices=MODEL_KINDS, required=True)
    p.add_argument("--a1", type=float, required=True)
    p.add_argument("--a2", type=float, required=True)
    p.add_argument("--kappa", type=float, default=None)
    p.add_argument("--iters", type=int, default=200)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("learn", help="learn regularisation parameters by multistart BFGS")
    p.add_argument("input", help="noisy volume")
    p.add_argument("truth", help="ground-truth volume")
    p.add_argument("outdir")
    p.add_argument("--model", choices=MODEL_KINDS, required=True)
    p.add_argument("--starts", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON file with OuterConfig overrides")
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("report", help="tabulate learn results")
    p.add_argument("results", nargs="+")
    p.add_argument("--csv", default=None, help="also write the table as CSV")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"icvideo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (VvolError, PgmError, FileNotFoundError, IsADirectoryError,
            PermissionError) as exc:
        print(f"icvideo: i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DivergenceError, KrylovError) as exc:
        print(f"icvideo: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"icvideo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeError as exc:
        print(f"icvideo: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
