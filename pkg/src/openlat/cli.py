"""Command line front end.

One subcommand per experiment kind plus `lattice` and `operator` for
inspecting the discretization itself.  Experiment subcommands load a
YAML config, run the experiment and print one PASS/FAIL line per check;
the exit code is 0 when all asserted checks pass, 1 when any fails and
2 on configuration or runtime errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="openlat",
        description="lattice walks and boundary-driven particle systems",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    from .lab import EXPERIMENT_KINDS

    for kind in EXPERIMENT_KINDS:
        sp = sub.add_parser(kind, help=f"run the {kind.replace('_', ' ')} experiment")
        _experiment_flags(sp)

    sp = sub.add_parser("lattice", help="build a lattice and dump site/edge tables")
    sp.add_argument("--config", required=True, help="YAML config with a domain and eps list")
    sp.add_argument("--out", default=None, help="output directory")
    sp.add_argument("--eps", type=float, default=None, help="override the spacing")

    sp = sub.add_parser("operator", help="assemble a walk and dump spectrum and profile")
    sp.add_argument("--config", required=True, help="YAML config with domain, eps, beta, theta")
    sp.add_argument("--out", default=None, help="output directory")
    sp.add_argument("--count", type=int, default=6, help="number of eigenvalues")
    return parser


def _experiment_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", required=True, help="YAML experiment config")
    sp.add_argument("--out", default=None, help="output directory")
    sp.add_argument("--seed", type=int, default=None, help="override the config seed")
    sp.add_argument("--threads", type=int, default=None, help="worker threads for replicas")
    sp.add_argument("--quick", action="store_true", help="coarser eps list, fewer replicas")


def _cmd_lattice(args) -> int:
    from .geometry import build_domain_lattice, save_lattice_csv
    from .lab import load_config

    cfg = _load_any(args.config)
    domain = cfg.domain_spec()
    eps = args.eps if args.eps is not None else cfg.eps[0]
    lattice = build_domain_lattice(domain, eps)
    out = Path(args.out or "runs/lattice")
    out.mkdir(parents=True, exist_ok=True)
    sites, edges = save_lattice_csv(lattice, out)
    print(f"{lattice.n_sites} sites, {lattice.n_outer} outer, eps={lattice.eps:g}")
    print(f"wrote {sites}")
    print(f"wrote {edges}")

    import matplotlib.pyplot as plt

    fig, axis = plt.subplots(figsize=(5.5, 5.5))
    if lattice.d == 2:
        axis.scatter(*lattice.coords.T, s=12, label="interior")
        inner = lattice.coords[lattice.is_inner]
        axis.scatter(*inner.T, s=14, label="inner boundary")
        if lattice.n_outer:
            axis.scatter(*lattice.outer_coords.T, s=12, marker="x", label="outer")
        axis.set_aspect("equal")
        axis.legend(fontsize=8)
    else:
        axis.hist(lattice.degree, bins=np.arange(2 * lattice.d + 2) - 0.5)
        axis.set_xlabel("degree")
    axis.set_title(f"eps = {lattice.eps:g}")
    fig.tight_layout()
    fig.savefig(out / "lattice.png", dpi=150)
    plt.close(fig)
    print(f"wrote {out / 'lattice.png'}")
    return 0


def _cmd_operator(args) -> int:
    import math

    from .geometry import build_domain_lattice
    from .lab import profile_expression
    from .operators import assemble_walk

    cfg = _load_any(args.config)
    domain = cfg.domain_spec()
    lattice = build_domain_lattice(domain, cfg.eps[0])
    op = assemble_walk(lattice, cfg.beta)
    out = Path(args.out or "runs/operator")
    out.mkdir(parents=True, exist_ok=True)

    op.save_coo(out / "generator.txt")
    print(f"wrote {out / 'generator.txt'}")
    spec = op.spectrum(args.count)
    _dump_csv(
        out / "eigenvalues.csv",
        ["n", "lambda"],
        [[n, float(v)] for n, v in enumerate(spec.eigenvalues)],
    )
    coord_cols = [f"x{a + 1}" for a in range(lattice.d)]
    _dump_csv(
        out / "eigenfunctions.csv",
        ["site", *coord_cols, *[f"psi_{n}" for n in range(len(spec.eigenvalues))]],
        [
            [i, *map(float, lattice.coords[i]), *map(float, spec.eigenfunctions[i])]
            for i in range(lattice.n_sites)
        ],
    )
    print(f"eps={lattice.eps:g} beta={cfg.beta:g}: lambda_0 = {spec.eigenvalues[0]:.6g}")
    if not math.isinf(cfg.beta):
        h = op.harmonic_profile(profile_expression(cfg.theta, lattice.d))
        _dump_csv(
            out / "profile.csv",
            ["site", *coord_cols, "h"],
            [[i, *map(float, lattice.coords[i]), float(h[i])] for i in range(lattice.n_sites)],
        )

    import matplotlib.pyplot as plt

    fig, axis = plt.subplots(figsize=(6.0, 4.5))
    axis.plot(np.arange(len(spec.eigenvalues)), spec.eigenvalues, "o-")
    axis.set_xlabel("n")
    axis.set_ylabel("lambda_n")
    axis.set_title(f"walk spectrum, eps={lattice.eps:g}, beta={cfg.beta:g}")
    fig.tight_layout()
    fig.savefig(out / "spectrum.png", dpi=150)
    plt.close(fig)
    print(f"wrote {out / 'spectrum.png'}")
    return 0


def _load_any(path):
    from .lab import ExperimentConfig, load_config

    try:
        return load_config(path)
    except Exception:
        # tool subcommands accept configs without an experiment key
        import yaml

        with open(path) as fh:
            data = yaml.safe_load(fh)
        data.setdefault("experiment", "spectral_convergence")
        return ExperimentConfig.from_dict(data)


def _dump_csv(path, header, rows) -> None:
    from .lab import _write_csv

    _write_csv(path, header, rows)
    print(f"wrote {path}")


def _cmd_experiment(args) -> int:
    from .lab import load_config, run_experiment

    config = load_config(args.config, experiment=args.command)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    summary = run_experiment(
        config, out=args.out, quick=args.quick, threads=args.threads
    )
    for check in summary["checks"]:
        status = "PASS" if check["passed"] else "FAIL"
        tag = "" if check["asserted"] else " [info]"
        detail = f"  ({check['detail']})" if check["detail"] else ""
        print(f"{status}{tag} {check['name']}{detail}")
    verdict = "passed" if summary["passed"] else "FAILED"
    print(f"{args.command}: {verdict}")
    return 0 if summary["passed"] else 1


def main(argv=None) -> int:
    os.environ.setdefault("MPLBACKEND", "Agg")
    parser = _build_parser()
    args = parser.parse_args(argv)

    from .geometry import GeometryError
    from .lab import EXPERIMENT_KINDS, ExperimentError
    from .operators import OperatorError
    from .particles import ParticleError

    try:
        if args.command == "lattice":
            return _cmd_lattice(args)
        if args.command == "operator":
            return _cmd_operator(args)
        if args.command in EXPERIMENT_KINDS:
            return _cmd_experiment(args)
        parser.error(f"unknown command {args.command!r}")
    except (ExperimentError, GeometryError, OperatorError, ParticleError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
