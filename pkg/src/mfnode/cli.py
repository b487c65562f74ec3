"""Command-line entry point: ``mfnode <subcommand> --config cfg.json [flags]``.

Exit codes: 0 success, 1 configuration error, 2 numerical failure (a JSON
diagnostic is printed to stderr and written to ``diagnostic.json``),
3 failed certificate (``certify`` only).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import platform
import sys
from pathlib import Path

import numpy as np
import pydantic
import scipy

from . import __version__
from .certify import CertificationError, certify, select_alpha
from .config import ConfigError, ExperimentConfig, load_config
from .cot import Sinkhorn, cot_distance
from .flow import FlowError, forward
from .kernels import full_kernel_matrix, k1_matrix
from .model import Dataset, ParameterMeasure, init_fixup, init_random, lift, synthetic_dataset
from .trainer import TrainerConfig, TrainingDiverged, TrajectoryLog, train

log = logging.getLogger("mfnode")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CERT = 0, 1, 2, 3


class _NumericFailure(Exception):
    def __init__(self, diagnostic: dict):
        super().__init__(diagnostic.get("error", "numerical failure"))
        self.diagnostic = diagnostic


# --------------------------------------------------------------------------
# Building blocks
# --------------------------------------------------------------------------


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    spec = cfg.dataset
    if spec.csv is not None:
        try:
            return Dataset.from_csv(spec.csv, spec.input_dim)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"dataset: {exc}") from None
    s = spec.synthetic
    try:
        return synthetic_dataset(s.N, s.d, s.d_prime, ball_radius=s.ball_radius,
                                 min_separation=s.min_separation, seed=s.seed)
    except RuntimeError as exc:
        raise ConfigError(f"dataset: {exc}") from None


def state_dim(cfg: ExperimentConfig, data: Dataset) -> int:
    if cfg.lift.enabled:
        return data.d + data.d_prime
    if data.d != data.d_prime:
        raise ConfigError(f"d = {data.d} differs from d' = {data.d_prime}; enable lift")
    return data.d


def build_measure(cfg: ExperimentConfig, dim: int) -> ParameterMeasure:
    mc = cfg.model
    try:
        if mc.init.kind == "fixup":
            return init_fixup(mc.S, mc.m, dim, mc.init.features.as_mapping(),
                              activation=mc.activation, seed=mc.seed,
                              tied_slices=mc.init.tied_slices)
        return init_random(mc.S, mc.m, dim, scale=mc.init.scale, activation=mc.activation,
                           seed=mc.seed)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from None


def _load_or_build(cfg, data, checkpoint):
    dim = state_dim(cfg, data)
    if checkpoint is None:
        return build_measure(cfg, dim)
    try:
        mu = ParameterMeasure.load(checkpoint)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"checkpoint {checkpoint}: {exc}") from None
    if mu.dim != dim:
        raise ConfigError(f"checkpoint dimension {mu.dim} does not match the data ({dim})")
    return mu


def _problem(cfg, data, mu, threads):
    """Training target with a resolved alpha; returns (problem, certificate or None)."""
    if not cfg.lift.enabled:
        return data, None
    if cfg.lift.alpha == "auto":
        try:
            alpha, cert = select_alpha(lift(data, 1.0), mu, cfg.lift.budget,
                                       n_directions=cfg.certify.n_directions,
                                       seed=cfg.certify.probe_seed, threads=threads)
        except FlowError as exc:
            raise _NumericFailure(exc.diagnostic) from None
        except CertificationError as exc:
            raise _NumericFailure({"error": f"alpha selection failed: {exc}"}) from None
        return lift(data, alpha), cert
    return lift(data, float(cfg.lift.alpha)), None


def _versions() -> dict:
    return {"mfnode": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pydantic": pydantic.__version__}


def write_manifest(out: Path, cfg: ExperimentConfig, command: str, extra: dict | None = None):
    manifest = {
        "command": command,
        "config": cfg.model_dump(mode="json"),
        "config_sha256": cfg.sha256(),
        "seeds": {"model": cfg.model.seed, "trainer": cfg.trainer.seed,
                  "dataset": cfg.dataset.synthetic.seed if cfg.dataset.synthetic else None,
                  "probe": cfg.certify.probe_seed},
        "versions": _versions(),
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _outdir(cfg) -> Path:
    out = Path(cfg.outputs.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_init(args, cfg) -> int:
    data = build_dataset(cfg)
    mu = build_measure(cfg, state_dim(cfg, data))
    out = _outdir(cfg)
    path = out / "init.ckpt"
    mu.save(path)
    write_manifest(out, cfg, "init", {"checkpoint": str(path)})
    print(path)
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    data = build_dataset(cfg)
    mu = _load_or_build(cfg, data, args.init)
    out = _outdir(cfg)
    problem, cert = _problem(cfg, data, mu, args.threads)
    tc = cfg.trainer
    tconf = TrainerConfig(eta0=tc.eta0, t_max=tc.t_max, adaptive=tc.adaptive,
                          monitors=frozenset(tc.monitors), checkpoint_every=tc.checkpoint_every,
                          distance_every=tc.distance_every, max_steps=tc.max_steps, seed=tc.seed)
    extra = {"alpha": getattr(problem, "alpha", None)}
    jsonl = out / "trajectory.jsonl"
    try:
        mu_T, traj = train(mu, problem, tconf, jsonl_path=jsonl,
                           checkpoint_dir=out / "checkpoints" if tc.checkpoint_every else None)
    except TrainingDiverged as exc:
        exc.log.to_jsonl(jsonl)
        raise _NumericFailure(exc.diagnostic) from None
    except FlowError as exc:
        raise _NumericFailure(exc.diagnostic) from None
    if "jsonl" not in cfg.outputs.formats:
        jsonl.unlink()
    if "csv" in cfg.outputs.formats:
        traj.to_csv(out / "trajectory.csv")
    mu_T.save(out / "final.ckpt")
    if cert is not None:
        (out / "certificate.json").write_text(cert.to_json() + "\n")
    extra.update(status=traj.status, steps=traj.steps)
    write_manifest(out, cfg, "train", extra)
    last = traj.records[-1]
    print(f"{traj.status}: {traj.steps} steps, t = {last.t:.6g}, "
          f"loss {traj.records[0].loss:.6g} -> {last.loss:.6g}")
    return EXIT_OK


def cmd_certify(args, cfg) -> int:
    data = build_dataset(cfg)
    mu = _load_or_build(cfg, data, args.init)
    out = _outdir(cfg)
    kw = dict(n_directions=cfg.certify.n_directions, seed=cfg.certify.probe_seed,
              threads=args.threads)
    try:
        if cfg.lift.enabled and cfg.lift.alpha == "auto":
            try:
                _, cert = select_alpha(lift(data, 1.0), mu, cfg.lift.budget, **kw)
            except CertificationError as exc:
                cert = certify(mu, lift(data, 1.0), **kw)
                if cert.lambda0 > 0:
                    cert = dataclasses.replace(cert, reason=str(exc))
        else:
            problem = lift(data, float(cfg.lift.alpha)) if cfg.lift.enabled else data
            cert = certify(mu, problem, **kw)
    except FlowError as exc:
        raise _NumericFailure(exc.diagnostic) from None
    (out / "certificate.json").write_text(cert.to_json() + "\n")
    write_manifest(out, cfg, "certify", {"passed": cert.passed, "reason": cert.reason})
    print(cert.table())
    print(cert.to_json())
    if not cert.passed:
        print(f"certificate failed: {cert.reason}", file=sys.stderr)
        return EXIT_CERT
    return EXIT_OK


def cmd_distance(args, cfg) -> int:
    try:
        a = ParameterMeasure.load(args.first)
        b = ParameterMeasure.load(args.second)
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    solver = "exact" if args.solver == "exact" else Sinkhorn(eps=args.eps)
    try:
        d, plan = cot_distance(a, b, solver)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    result = {"distance": d, "solver": args.solver, "slice_costs": plan.slice_costs.tolist()}
    if cfg is not None:
        out = _outdir(cfg)
        (out / "distance.json").write_text(json.dumps(result, indent=2) + "\n")
        write_manifest(out, cfg, "distance", {"first": args.first, "second": args.second})
    print(json.dumps(result))
    return EXIT_OK


def cmd_kernel(args, cfg) -> int:
    data = build_dataset(cfg)
    mu = _load_or_build(cfg, data, args.init)
    problem, _ = _problem(cfg, data, mu, args.threads)
    out = _outdir(cfg)
    try:
        flow = forward(mu, problem)
    except FlowError as exc:
        raise _NumericFailure(exc.diagnostic) from None
    with open(out / "kernel_k1.csv", "w", newline="") as fk, \
            open(out / "kernel_eigen.csv", "w", newline="") as fe:
        wk, we = csv.writer(fk), csv.writer(fe)
        wk.writerow(["slice", "i", "j", "k1"])
        we.writerow(["slice", "kernel", "index", "eigenvalue"])
        for k in range(mu.S):
            X = flow.at(k)
            km = k1_matrix(mu.theta[k], X, mu.activation)
            for (i, j), v in np.ndenumerate(km.entries):
                wk.writerow([k, i, j, repr(float(v))])
            for name, mat in (("k1", km), ("K", full_kernel_matrix(mu.theta[k], X, mu.activation))):
                for idx, ev in enumerate(np.linalg.eigvalsh(mat.entries)):
                    we.writerow([k, name, idx, repr(float(ev))])
    write_manifest(out, cfg, "kernel")
    print(out / "kernel_k1.csv")
    return EXIT_OK


def cmd_report(args, cfg) -> int:
    run = Path(args.run_dir) if args.run_dir else Path(cfg.outputs.dir)
    path = run / "trajectory.jsonl"
    try:
        traj = TrajectoryLog.from_jsonl(path)
    except (OSError, ValueError, TypeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    if not traj.records:
        raise ConfigError(f"{path} holds no records")
    with open(run / "loss_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "t", "loss", "grad_norm_sq"])
        for r in traj.records[1:]:
            w.writerow([r.step, repr(r.t), repr(r.loss), repr(r.grad_norm_sq)])
    first, last = traj.records[0], traj.records[-1]
    summary = {
        "steps": traj.steps, "t_final": last.t, "initial_loss": first.loss,
        "final_loss": last.loss,
        "reduction": first.loss / last.loss if last.loss > 0 else math.inf,
        "max_ede_residual": max((r.ede_residual or 0.0) for r in traj.records),
        "max_dist_init": max((r.dist_init or 0.0) for r in traj.records),
    }
    (run / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    for k, v in summary.items():
        print(f"{k:18s} {v:.6g}" if isinstance(v, float) else f"{k:18s} {v}")
    return EXIT_OK


def cmd_synth(args, cfg) -> int:
    if cfg.dataset.synthetic is None:
        raise ConfigError("synth needs a dataset.synthetic section")
    data = build_dataset(cfg)
    out = _outdir(cfg)
    path = Path(args.output) if args.output else out / "dataset.csv"
    data.to_csv(path)
    write_manifest(out, cfg, "synth", {"dataset": str(path), "separation": data.separation})
    print(path)
    return EXIT_OK


COMMANDS = {"init": cmd_init, "train": cmd_train, "certify": cmd_certify,
            "distance": cmd_distance, "kernel": cmd_kernel, "report": cmd_report,
            "synth": cmd_synth}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="override model.seed and trainer.seed")
    common.add_argument("--threads", type=int, default=1, help="worker cap for probes")
    common.add_argument("--out-dir", help="override outputs.dir")
    common.add_argument("--format", choices=["csv", "jsonl"], help="write only this log format")
    common.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                        help="override a dotted config path (JSON value)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mfnode", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("init", parents=[common], help="write an initial checkpoint")
    for name, text in (("train", "run the gradient flow"), ("certify", "compute the certificate"),
                       ("kernel", "dump kernel matrices and eigenvalues")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--init", help="start from this checkpoint instead of the config init")
    p = sub.add_parser("distance", parents=[common], help="distance between two checkpoints")
    p.add_argument("first")
    p.add_argument("second")
    p.add_argument("--solver", choices=["exact", "sinkhorn"], default="exact")
    p.add_argument("--eps", type=float, default=1e-2)
    p = sub.add_parser("report", parents=[common], help="summarize a training run")
    p.add_argument("run_dir", nargs="?")
    p = sub.add_parser("synth", parents=[common], help="generate a dataset CSV")
    p.add_argument("--output", help="CSV path (default: <out-dir>/dataset.csv)")
    return parser


def _resolve_config(args) -> ExperimentConfig | None:
    overrides = list(args.set)
    if args.seed is not None:
        overrides += [f"model.seed={args.seed}", f"trainer.seed={args.seed}"]
    if args.out_dir is not None:
        overrides.append(f"outputs.dir={json.dumps(args.out_dir)}")
    if args.format is not None:
        overrides.append(f'outputs.formats=["{args.format}"]')
    if args.config is None and not overrides:
        if args.command in ("distance", "report"):
            return None
        raise ConfigError(f"{args.command} needs --config")
    if args.config is None and args.command == "report":
        return None if args.run_dir else load_config(None, overrides)
    return load_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("config error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = _resolve_config(args)
        if cfg is None and args.command == "report" and not args.run_dir:
            raise ConfigError("report needs a run directory or --config")
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _NumericFailure as exc:
        diag = json.dumps(exc.diagnostic, default=float)
        print(diag, file=sys.stderr)
        if cfg is not None:
            (_outdir(cfg) / "diagnostic.json").write_text(diag + "\n")
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
