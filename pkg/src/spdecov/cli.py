"""Command line entry point: ``spdecov <subcommand> --config cfg.json --out dir``.

Exit codes: 0 success, 2 configuration error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .errors import ConfigurationError, NumericalError
from .estimator import (PathObservations, estimation_error, read_observations_csv, realized_covariation,
                        write_observations_csv)
from .gof import test_fixed, test_parametric
from .kernels import InverseFractionalLaplacian, ParameterBox, kernel_from_dict
from .observation import ObservationScheme
from .sampler import replication_rng
from .spectral import Boundary, SpectralOperator

log = logging.getLogger("spdecov")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigurationError("config must be a JSON object")
    cfg.setdefault("_base", str(Path(path).resolve().parent))
    return cfg


def _require(cfg, key):
    if key not in cfg:
        raise ConfigurationError(f"config is missing {key!r}")
    return cfg[key]


def _scheme_from(cfg) -> ObservationScheme:
    kind = cfg.get("scheme", "pointwise")
    cells = int(_require(cfg, "cells"))
    if kind == "identity":
        return ObservationScheme.identity(cells)
    return ex._scheme(kind, cells)


def _operator_from(d, default) -> SpectralOperator:
    if not d:
        return default
    return SpectralOperator(Boundary(d.get("boundary", default.boundary.value)),
                            float(d.get("base_shift", default.base_shift)),
                            float(d.get("diffusivity", default.diffusivity)),
                            int(d.get("mode_count", default.mode_count)))


def _observations_from(cfg) -> PathObservations:
    path = Path(_require(cfg, "observations"))
    if not path.is_absolute():
        path = Path(cfg.get("_base", ".")) / path
    values = read_observations_csv(path)
    return PathObservations(values, float(_require(cfg, "delta")), float(cfg.get("horizon", 1.0)),
                            _scheme_from(cfg))


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)


# ---------------------------------------------------------------- subcommands

def cmd_simulate(cfg, args, out: Path):
    kernel = kernel_from_dict(_require(cfg, "kernel"))
    delta = float(_require(cfg, "delta"))
    horizon = float(cfg.get("horizon", 1.0))
    scheme = _scheme_from(cfg)
    if scheme.kind.value == "identity":
        raise ConfigurationError("simulate writes pointwise or local_average observations")
    rng = replication_rng(args.seed if args.seed is not None else int(cfg.get("seed", 0)), 0)
    if isinstance(kernel, InverseFractionalLaplacian):
        values = ex._spectral_observations(kernel, scheme, delta, horizon, rng)
    else:
        sim_step = ex.PAPER_SIM_STEP if args.paper_scale else float(cfg.get("sim_step", ex.DESK_SIM_STEP))
        op = _operator_from(cfg.get("operator"), ex.FEM_OPERATOR)
        values = ex._fem_observations(kernel, scheme, delta, horizon, sim_step, [rng], op)[0]
    obs_path = out / "observations.csv"
    write_observations_csv(obs_path, values)
    meta = {"observations": obs_path.name, "delta": delta, "horizon": horizon,
            "scheme": scheme.kind.value, "cells": scheme.subdivision.n_cells, "kernel": kernel.to_dict()}
    _write_json(out / "observations.json", meta)
    print(f"wrote {obs_path} ({values.shape[0]} times x {values.shape[1]} coordinates)")


def cmd_estimate(cfg, args, out: Path):
    obs = _observations_from(cfg)
    rv = realized_covariation(obs)
    rv.to_csv(out / "rv.csv")
    summary = {"delta": obs.delta, "horizon": obs.horizon, "size": int(rv.matrix.shape[0])}
    if "reference" in cfg:
        ref = kernel_from_dict(cfg["reference"])
        fine = ex._scheme(obs.scheme.kind.value if obs.scheme.kind.value != "identity" else "pointwise",
                          int(cfg.get("fine_cells", 512)))
        summary["hs_error"] = estimation_error(rv, ref, fine)
    _write_json(out / "estimate.json", summary)
    print(json.dumps(summary))


def _null_scheme(cfg, obs):
    levels = int(cfg.get("null_refinement", 0))
    if levels <= 0:
        return None
    kind = "pointwise" if obs.scheme.uses_hat_basis else "local_average"
    return ex._scheme(kind, obs.scheme.subdivision.n_cells * 2 ** levels)


def cmd_test_fixed(cfg, args, out: Path):
    obs = _observations_from(cfg)
    null = kernel_from_dict(_require(cfg, "null"))
    rep = test_fixed(obs, null, float(cfg.get("alpha", 0.05)), _null_scheme(cfg, obs))
    line = rep.to_json()
    (out / "test_fixed.json").write_text(line + "\n")
    print(line)


def cmd_test_parametric(cfg, args, out: Path):
    obs = _observations_from(cfg)
    family = _require(cfg, "family")
    box = ParameterBox(tuple(_require(cfg, "lower")), tuple(_require(cfg, "upper")))
    op = _operator_from(cfg.get("operator"), SpectralOperator(mode_count=300)) \
        if family in ("inverse_fractional_laplacian", "ifl") else None
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    rep = test_parametric(obs, family, box, float(cfg.get("alpha", 0.05)), op, _null_scheme(cfg, obs),
                          n_scan=int(cfg.get("n_scan", 64)), budget=int(cfg.get("budget", 400)), seed=seed)
    line = rep.to_json()
    (out / "test_parametric.json").write_text(line + "\n")
    print(line)


def _study_dict(cfg, args):
    d = {k: v for k, v in cfg.items() if not k.startswith("_")}
    if args.seed is not None:
        d["seed"] = args.seed
    if args.paper_scale:
        d["sim_step"] = ex.PAPER_SIM_STEP
    return d


def cmd_rate_study(cfg, args, out: Path):
    d = _study_dict(cfg, args)
    if args.full:
        d["replications"] = 120
    res = ex.run_rate_study(ex.RateStudyConfig.from_dict(d), threads=args.threads)
    ex.emit_report(res.rows, "csv", out / "rate_study.csv")
    ex.emit_report(res.slope_rows(), "csv", out / "rate_slopes.csv")
    guides = (0.5,) if res.expected_rate is None else tuple(sorted({0.5, float(res.expected_rate)}))
    ex.emit_report(res.rows, "svg", out / "rate_study.svg", guides=guides)
    for nu, (s, _, _) in res.slopes.items():
        print(f"nu={nu:g} slope={s:.4f}")


def cmd_rejection_study(cfg, args, out: Path):
    d = _study_dict(cfg, args)
    if args.full:
        d["replications"] = 10_000
    if args.paper_scale:
        # h = 2^-8 for the simulated truth and for the null discretization
        levels = max(0, int(round(8 + np.log2(float(d.get("h", 2.0 ** -4))))))
        d.setdefault("sim_refinement", levels)
        d.setdefault("null_refinement", levels)
    rows = ex.run_rejection_study(ex.RejectionStudyConfig.from_dict(d), threads=args.threads)
    ex.emit_report(rows, "csv", out / "rejection_study.csv")
    ex.emit_report(rows, "svg", out / "rejection_study.svg")
    print(f"wrote {len(rows)} rows to {out / 'rejection_study.csv'}")


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "test-fixed": cmd_test_fixed,
    "test-parametric": cmd_test_parametric,
    "rate-study": cmd_rate_study,
    "rejection-study": cmd_rejection_study,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spdecov", description="Noise covariance estimation and testing for "
                                "stochastic heat equations on (0, 1).")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--out", default=".", help="output directory (created if missing)")
        s.add_argument("--threads", type=int, default=1, help="worker processes for studies")
        s.add_argument("--full", action="store_true", help="full replication counts")
        s.add_argument("--paper-scale", action="store_true",
                       help="FEM simulation step 2^-18 (rejection study: truth and null grids at h = 2^-8)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigurationError("--threads must be at least 1")
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigurationError("--seed must be an unsigned 64-bit integer")
        cfg = _load_config(args.config)
        out = Path(args.out)
        try:
            os.makedirs(out, exist_ok=True)
        except OSError as exc:
            raise ConfigurationError(f"cannot create output directory {out}: {exc}") from exc
        COMMANDS[args.command](cfg, args, out)
    # LinAlgError subclasses ValueError, so numerical failures are matched first
    except (NumericalError, np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigurationError, ValueError, KeyError, TypeError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
