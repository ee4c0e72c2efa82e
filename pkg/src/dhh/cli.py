"""Command-line entry point: generate, train, eval, sweep, plot."""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import data, evaluate, nets, svgplot
from .systems import SYSTEM_NAMES, LearnedHamiltonian
from .training import TrainConfig, TrainingError, train

OUT_ENV = "DHH_OUT"


class CliError(Exception):
    """Bad user input; reported without a traceback, exit code 2."""


def _out_dir(arg) -> Path:
    return Path(arg or os.environ.get(OUT_ENV, "runs"))


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seeds, inputs, outputs) -> Path:
    doc = {
        "tool": "dhh",
        "version": __version__,
        "command": command,
        "config": config,
        "seeds": list(seeds),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def _write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def _write_traj(path: Path, traj, d: int) -> Path:
    header = ["t"] + [f"q{i + 1}" for i in range(d)] + [f"p{i + 1}" for i in range(d)]
    lines = [",".join(header)]
    for t, row in zip(traj.times, traj.states):
        lines.append(",".join(f"{v:.17g}" for v in (t, *row)))
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    ds = data.build_dataset(args.system, args.n, args.mode, args.sigma, args.seed, args.observe)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    csv, side = data.write_dataset(ds, out)
    print(f"wrote {csv} ({len(ds.observations)} rows) and {side}")
    return 0


def _load_config(path) -> TrainConfig:
    try:
        return TrainConfig.from_json(path)
    except (ValueError, TypeError) as exc:
        raise CliError(f"invalid training config {path}: {exc}") from exc


def _load_dataset(path) -> data.Dataset:
    if not Path(path).exists():
        raise CliError(f"dataset {path} does not exist")
    try:
        return data.read_dataset(path)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        raise CliError(f"invalid dataset {path}: {exc}") from exc


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    ds = _load_dataset(args.data)
    out = _out_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train(cfg, ds)
    ckpt = out / "checkpoint.json"
    doc = {"method": cfg.method, "train_config": cfg.to_dict(),
           "nets": {role: nets.params_to_json(p, c) for role, (p, c) in res.nets.items()}}
    _write_json(ckpt, doc)
    curves = out / "losses.csv"
    res.write_curves(curves)
    write_manifest(out, "train", cfg.to_dict(), [cfg.seed],
                   [Path(args.config), Path(args.data), Path(args.data).with_suffix(".json")],
                   [ckpt, curves])
    print(f"trained {cfg.method} for {cfg.steps} steps; final loss {res.curves[-1, 1]:.3e}"
          if cfg.steps else f"wrote untrained {cfg.method} checkpoint")
    return 0


def load_trained(path) -> tuple[str, dict, dict]:
    path = Path(path)
    if not path.exists():
        raise CliError(f"checkpoint {path} does not exist")
    doc = json.loads(path.read_text())
    try:
        roles = {role: nets.params_from_json(d) for role, d in doc["nets"].items()}
        return doc["method"], roles, doc.get("train_config", {})
    except (KeyError, ValueError) as exc:
        raise CliError(f"invalid checkpoint {path}: {exc}") from exc


def cmd_eval(args) -> int:
    method, roles, cfg = load_trained(args.checkpoint)
    ds = _load_dataset(args.data)
    scheme = None if args.scheme == "default" else args.scheme
    scheme = scheme or evaluate.DEFAULT_SCHEME[method]
    out = _out_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    times = evaluate.eval_times(ds)
    est = evaluate.reconstruct_trajectory(method, roles, ds, times, scheme, args.initial)
    mse, log_mse = evaluate.traj_log_mse(est, evaluate.truth_on(ds, times))
    result = {"method": method, "system": ds.system.name, "scheme": scheme,
              "initial": args.initial if scheme != "solution" else None,
              "n_points": len(ds.observations), "noise_sigma": ds.noise_sigma,
              "seed": ds.meta.get("seed"), "mse": mse, "log_mse": log_mse}
    if "hamiltonian" in roles:
        result["hamiltonian"] = evaluate.compare_hamiltonian(
            LearnedHamiltonian(*roles["hamiltonian"]), ds.system, evaluate.probe_grid(ds))
    if not ds.fully_observed and "solution" in roles:
        result["hidden"] = evaluate.hidden_coordinate_report(roles, ds, times)
    tag = scheme if scheme == "solution" else f"{scheme}_{args.initial}"
    traj_path = _write_traj(out / f"trajectory_{tag}.csv", est, ds.d)
    res_path = _write_json(out / f"result_{tag}.json", result)
    write_manifest(out, "eval", {"scheme": scheme, "initial": args.initial, "train_config": cfg},
                   [ds.meta.get("seed")], [Path(args.checkpoint), Path(args.data)],
                   [traj_path, res_path])
    print(f"{method} [{scheme}] mse={mse:.4e} log_mse={log_mse:.3f}")
    return 0


SWEEP_KEYS = {"systems", "methods", "n_points", "noise", "seeds", "mode", "train", "lambda_extra"}


def load_sweep_config(path) -> dict:
    doc = json.loads(Path(path).read_text())
    unknown = set(doc) - SWEEP_KEYS
    if unknown:
        raise CliError(f"unknown sweep config field(s): {', '.join(sorted(unknown))}")
    doc.setdefault("n_points", list(evaluate.DEFAULT_N_GRID))
    for key in ("systems", "methods", "n_points"):
        if not doc.get(key):
            raise CliError(f"sweep config needs a non-empty {key!r}")
    for s in doc["systems"]:
        if s not in SYSTEM_NAMES:
            raise CliError(f"unknown system {s!r}; expected one of {', '.join(SYSTEM_NAMES)}")
    TrainConfig(**{**doc.get("train", {}), "method": doc["methods"][0]})
    for m in doc["methods"]:
        TrainConfig(method=m)
    return doc


def _write_plots(report: dict, out: Path) -> list[Path]:
    paths = []
    for name, svg in svgplot.report_charts(report).items():
        p = out / f"{name}.svg"
        p.write_text(svg)
        paths.append(p)
    return paths


def cmd_sweep(args) -> int:
    try:
        doc = load_sweep_config(args.config)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    out = _out_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = doc.get("seeds", 5)

    def progress(r):
        print(f"{r.system} {r.method} n={r.n_points} sigma={r.noise_sigma:g} seed={r.seed} "
              f"log_mse={r.log_mse:.3f}" + (f" FAILED ({r.error})" if r.error else ""), flush=True)

    report = evaluate.sweep(doc["systems"], doc["methods"], doc["n_points"], doc.get("noise", [0.0]),
                            seeds, doc.get("mode", "regular"), doc.get("train"),
                            doc.get("lambda_extra"), jobs=args.jobs, progress=progress)
    files = report.write(out)
    files += _write_plots(report.to_json(), out)
    seed_list = list(range(seeds)) if isinstance(seeds, int) else seeds
    write_manifest(out, "sweep", doc, seed_list, [Path(args.config)], files)
    print(f"{len(report.results)} runs in {len(report.cells)} cells -> {out}")
    return 0


def cmd_plot(args) -> int:
    path = Path(args.report)
    if not path.exists():
        raise CliError(f"report {path} does not exist")
    report = json.loads(path.read_text())
    out = _out_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = _write_plots(report, out)
    print(f"wrote {len(files)} chart(s) to {out}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dhh", description="Learn Hamiltonian trajectories from observations.")
    ap.add_argument("--version", action="version", version=f"dhh {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a benchmark system and write an observation dataset")
    g.add_argument("--system", required=True, choices=SYSTEM_NAMES)
    g.add_argument("--n", type=int, required=True, help="number of observations")
    g.add_argument("--mode", choices=("regular", "irregular"), default="regular")
    g.add_argument("--sigma", type=float, default=0.0, help="observation noise stddev")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--observe", choices=("all", "q", "p"), default="all")
    g.add_argument("--out", required=True, help="CSV path; the JSON sidecar is written next to it")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one method on a dataset")
    t.add_argument("--config", required=True, help="training config JSON")
    t.add_argument("--data", required=True, help="dataset CSV")
    t.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="reconstruct a trajectory and score it against ground truth")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--scheme", choices=("default", "solution", "euler", "rk2", "rk4"), default="default")
    e.add_argument("--initial", choices=("observed", "truth", "solution"), default="observed",
                   help="initial state for integrator schemes")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="run a grid of experiments and write report, CSV and charts")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--jobs", type=int, default=1, help="concurrent runs")
    s.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="render charts from a sweep report.json")
    p.add_argument("--report", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
