"""Command line entry point: ``nqes {run,resume,ed,ion-crystal,hs-exact}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 finished but not converged (imaginary energy residuals above tolerance).
Environment: NQES_THREADS caps sampler threads, NQES_OUTPUT_DIR overrides
the output directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import ed, ions, orchestrator
from .spins import ConstraintError, DimensionError, build_model, hs_exact_energy

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_NOT_CONVERGED = 4

# imaginary residual above this many standard errors flags non-convergence
IMAG_SIGMAS = 5.0


def _emit(obj, path=None):
    text = json.dumps(obj, indent=1)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    print(text)


def _converged(report) -> bool:
    imag = np.asarray(report.get("imag_residuals", []))
    err = np.asarray(report.get("stderr", []))
    return bool(np.all(imag <= IMAG_SIGMAS * np.maximum(err, 1e-12)))


def _summary(report):
    keys = ("energies", "stderr", "imag_residuals", "gap", "gap_stderr", "model_hash")
    return {k: report[k] for k in keys if k in report}


def cmd_run(args):
    config = orchestrator.ExperimentConfig.load(args.config)
    report = orchestrator.run_experiment(config, output_dir=args.output)
    _emit(_summary(report))
    return EXIT_OK if _converged(report) else EXIT_NOT_CONVERGED


def cmd_resume(args):
    report = orchestrator.resume(args.checkpoint, args.output)
    _emit(_summary(report))
    return EXIT_OK if _converged(report) else EXIT_NOT_CONVERGED


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise orchestrator.ConfigError(f"cannot read {path}: {err}") from err


def cmd_ed(args):
    """Config: {"model": {...}, "k": 4, "correlations": false}."""
    cfg = _load_json(args.config)
    if "model" not in cfg:
        raise orchestrator.ConfigError("ed config needs a 'model' entry")
    H = build_model(cfg["model"], Path(args.config).parent)
    k = int(cfg.get("k", 1))
    res = ed.spectrum(H, k)
    out = {"model": cfg["model"], "n": H.n, "energies": res.energies.tolist()}
    if cfg.get("correlations"):
        out["zz"] = [ed.correlation_matrix(res.vectors[:, i], "z").tolist() for i in range(k)]
    _emit(out, args.output)
    return EXIT_OK


def cmd_ion_crystal(args):
    """Config keys: n_ions, trap_mhz [wx, wy, wz], seed, coupling
    ("single_mode" | "all_modes" | "power_law"), mode, detuning_khz,
    kac_target, mu_khz, alpha."""
    cfg = _load_json(args.config)
    n = int(cfg["n_ions"])
    trap = ions.TrapParams(*cfg.get("trap_mhz", ions.EXPERIMENT_TRAP_MHZ), n)
    crystal = ions.solve_equilibrium(trap, seed=int(cfg.get("seed", 0)))
    modes = ions.transverse_modes(crystal, trap)
    kind = cfg.get("coupling", "single_mode")
    wz_khz = trap.omega_z * 1e3
    if kind == "single_mode":
        cm = ions.single_mode_couplings(modes, int(cfg.get("mode", 7)), detuning=cfg.get("detuning_khz"),
                                        omega_z_khz=wz_khz, kac_target=cfg.get("kac_target"))
    elif kind == "all_modes":
        cm = ions.all_mode_couplings(modes, float(cfg["mu_khz"]), omega_z_khz=wz_khz)
    elif kind == "power_law":
        cm = ions.power_law_couplings(crystal, float(cfg.get("alpha", 1.0)))
    else:
        raise orchestrator.ConfigError(f"unknown coupling kind {kind!r}")
    _emit(ions.crystal_report(trap, crystal, modes, cm), args.output)
    return EXIT_OK


def cmd_hs_exact(args):
    print(repr(hs_exact_energy(args.n, args.m)))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="nqes", description="Excited states of spin models with RBM determinants")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and measure from a JSON config")
    r.add_argument("config")
    r.add_argument("--output", default=None)
    r.add_argument("--threads", type=int, default=None)
    r.set_defaults(func=cmd_run)

    r = sub.add_parser("resume", help="continue a run from its checkpoint")
    r.add_argument("checkpoint")
    r.add_argument("--output", default=None)
    r.add_argument("--threads", type=int, default=None)
    r.set_defaults(func=cmd_resume)

    r = sub.add_parser("ed", help="exact low-lying spectrum of a model")
    r.add_argument("config")
    r.add_argument("--output", default=None)
    r.set_defaults(func=cmd_ed)

    r = sub.add_parser("ion-crystal", help="crystal, phonon modes and Ising couplings")
    r.add_argument("config")
    r.add_argument("--output", default=None)
    r.set_defaults(func=cmd_ion_crystal)

    r = sub.add_parser("hs-exact", help="closed-form Haldane-Shastry energy")
    r.add_argument("n", type=int)
    r.add_argument("m", type=int)
    r.set_defaults(func=cmd_hs_exact)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", None):
        os.environ["NQES_THREADS"] = str(args.threads)
    try:
        return args.func(args)
    except (orchestrator.ConfigError, ConstraintError, DimensionError, KeyError, FileNotFoundError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, orchestrator.NumericalError, RuntimeError, np.linalg.LinAlgError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
