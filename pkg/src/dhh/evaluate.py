"""Trajectory reconstruction, error metrics and experiment sweeps."""
from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import nets
from .data import GROUND_TRUTH_DT, Dataset, build_dataset
from .integrators import RolloutSpec, Trajectory, rollout
from .systems import (LearnedHamiltonian, SingularityError, hamiltonian_gradient, hamiltonian_true, vector_field)
from .training import TrainConfig, TrainResult, TrainingError, train

LOG_FLOOR = 1e-12
EVAL_POINTS = 500
DEFAULT_N_GRID = (10, 20, 40, 80, 160)
DEFAULT_SCHEME = {"hnn_fd": "rk4", "hnn_oracle": "rk4", "neural_ode": "rk2", "dhh": "solution",
                  "dhpm": "solution"}


def eval_times(ds: Dataset, n: int = EVAL_POINTS) -> np.ndarray:
    return np.linspace(*ds.t_span, n)


class _Counted:
    """Wraps an rhs and counts calls (cost accounting)."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def __call__(self, t, s):
        self.calls += 1
        return self.fn(t, s)


class DynamicsField:
    """Learned black-box vector field ``f(s)`` as an rhs."""

    def __init__(self, params: nets.NetworkParams, config: nets.MlpConfig):
        self._net = nets.Mlp(config, "f")
        self._bound = self._net.bind(params)
        x = dc.var("s", (config.input_dim,))
        self._graph = dc.ComputeGraph(self._net.apply(x))

    def __call__(self, t, s):
        return self._graph.evaluate({**self._bound, "s": s})[0]


def learned_field(result_nets: dict, method: str):
    if method in ("hnn_fd", "hnn_oracle", "dhh"):
        return vector_field(LearnedHamiltonian(*result_nets["hamiltonian"]))
    if method in ("neural_ode", "dhpm"):
        return DynamicsField(*result_nets["dynamics"])
    raise ValueError(f"method {method!r} has no learned vector field")


def integrate_field(rhs, s0, t_span, times, scheme: str, dt: float = GROUND_TRUTH_DT) -> Trajectory:
    dense = rollout(scheme, rhs, s0, RolloutSpec(t_span[0], t_span[1], dt, scheme))
    return Trajectory(times, dense.interpolate(times))


def reconstruct_trajectory(method: str, result_nets: dict, ds: Dataset, times=None,
                           scheme: str | None = None, initial: str = "observed",
                           counter: dict | None = None) -> Trajectory:
    """Estimated trajectory at ``times`` (raw units).

    ``scheme='solution'`` reads the solution net (dhh/dhpm).  Any integrator
    scheme integrates the learned field from the first observed state
    (``initial='observed'``), the clean true initial state (``'truth'``) or the
    solution net's own estimate at the first time (``'solution'``).
    """
    times = eval_times(ds) if times is None else np.asarray(times, dtype=np.float64)
    t0, t1 = ds.t_span
    if np.any(times < t0 - 1e-12) or np.any(times > t1 + 1e-12):
        raise ValueError("evaluation times must lie in the training interval")
    scheme = scheme or DEFAULT_SCHEME[method]
    if scheme == "solution":
        if "solution" not in result_nets:
            raise ValueError(f"{method} has no solution network")
        p, c = result_nets["solution"]
        states = nets.forward(p, c, ds.time_map(times).reshape(-1, 1))
        return Trajectory(times, states)
    if initial == "observed":
        s0 = ds.observations.states[0]
    elif initial == "truth":
        s0 = ds.ground_truth.states[0]
    elif initial == "solution":
        p, c = result_nets["solution"]
        s0 = nets.forward(p, c, np.array([[ds.time_map(t0)]]))[0]
    else:
        raise ValueError(f"unknown initial-state source {initial!r}")
    rhs = _Counted(learned_field(result_nets, method))
    traj = integrate_field(rhs, s0, (t0, t1), times, scheme)
    if counter is not None:
        counter["rhs_calls"] = counter.get("rhs_calls", 0) + rhs.calls
    return traj


def traj_log_mse(estimate: Trajectory, truth: Trajectory) -> tuple[float, float]:
    a, b = np.asarray(estimate.states), np.asarray(truth.states)
    if a.shape != b.shape:
        raise ValueError(f"trajectory shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    return mse, math.log(max(mse, LOG_FLOOR)) if math.isfinite(mse) else math.inf


def truth_on(ds: Dataset, times) -> Trajectory:
    return Trajectory(times, ds.ground_truth.interpolate(times))


# ---------------------------------------------------------------- diagnostics

def probe_grid(ds: Dataset, per_axis: int = 21, pad: float = 0.1) -> np.ndarray:
    """Uniform grid over the box visited by the ground truth, padded 10%."""
    st = ds.ground_truth.states
    lo, hi = st.min(0), st.max(0)
    span = np.maximum(hi - lo, 1e-9)
    lo, hi = lo - pad * span, hi + pad * span
    w = st.shape[1]
    if w <= 2:
        axes = [np.linspace(lo[c], hi[c], per_axis) for c in range(w)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, w)
    # high-dimensional boxes: a fixed pseudo-random design instead of a full grid
    rng = np.random.default_rng(0)
    return lo + (hi - lo) * rng.uniform(size=(per_axis ** 2, w))


def compare_hamiltonian(learned, spec, probes: np.ndarray) -> dict:
    """Offset-corrected RMSE of energies and mean cosine of gradient fields."""
    probes = np.asarray(probes, dtype=np.float64)
    keep = []
    for i, s in enumerate(probes):
        try:
            hamiltonian_true(spec, s)
            keep.append(i)
        except SingularityError:
            pass
    probes = probes[keep]
    h_l = np.asarray(learned(probes), dtype=np.float64).reshape(-1)
    h_t = np.asarray(hamiltonian_true(spec, probes), dtype=np.float64).reshape(-1)
    diff = h_l - h_t
    rmse = float(np.sqrt(np.mean((diff - diff.mean()) ** 2)))
    g_l = np.asarray(learned.gradient(probes))
    g_t = hamiltonian_gradient(spec, probes)
    norms = np.linalg.norm(g_l, axis=1) * np.linalg.norm(g_t, axis=1)
    ok = norms > 0
    cos = float(np.mean(np.sum(g_l * g_t, axis=1)[ok] / norms[ok])) if ok.any() else 0.0
    return {"rmse": rmse, "cosine": cos, "n_probes": int(len(probes))}


def check_hidden_coordinate(estimate: np.ndarray, truth: np.ndarray) -> dict:
    """Compare a reconstructed coordinate with the truth up to an additive constant."""
    est = np.asarray(estimate, dtype=np.float64).reshape(-1)
    tru = np.asarray(truth, dtype=np.float64).reshape(-1)
    diff = est - tru
    rmse = float(np.sqrt(np.mean((diff - diff.mean()) ** 2)))
    se, st = est.std(), tru.std()
    # a constant estimate (up to rounding) carries no shape information
    if se <= 1e-12 * (1 + abs(est.mean())) or st <= 1e-12 * (1 + abs(tru.mean())):
        return {"rmse": rmse, "correlation": 0.0, "degenerate": True}
    corr = float(np.mean((est - est.mean()) * (tru - tru.mean())) / (se * st))
    return {"rmse": rmse, "correlation": corr, "degenerate": False}


def hidden_coordinate_report(result_nets: dict, ds: Dataset, times=None) -> dict:
    times = eval_times(ds) if times is None else times
    est = reconstruct_trajectory("dhh", result_nets, ds, times, "solution").states
    tru = ds.ground_truth.interpolate(times)
    hidden = np.flatnonzero(~ds.mask)
    reports = [check_hidden_coordinate(est[:, c], tru[:, c]) for c in hidden]
    return {"coordinates": [int(c) for c in hidden], "reports": reports}


# ---------------------------------------------------------------- experiment runs

@dataclass
class ExperimentResult:
    method: str
    system: str
    n_points: int
    noise_sigma: float
    seed: int
    mse: float
    log_mse: float
    coord_mse: list = field(default_factory=list)
    wall_time: float = 0.0
    lambda_extra: float | None = None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def run_experiment(system: str, method: str, n_points: int, sigma: float, seed: int,
                   mode: str = "regular", config: dict | None = None,
                   scheme: str | None = None) -> tuple[ExperimentResult, TrainResult | None]:
    """Generate data, train, reconstruct on the evaluation grid, score."""
    start = time.perf_counter()
    cfg = TrainConfig(**{**(config or {}), "method": method, "seed": seed})
    ds = build_dataset(system, n_points, mode, sigma, seed)
    try:
        res = train(cfg, ds)
        times = eval_times(ds)
        est = reconstruct_trajectory(method, res.nets, ds, times, scheme)
        tru = truth_on(ds, times)
        mse, log_mse = traj_log_mse(est, tru)
        coord = [float(v) for v in np.mean((est.states - tru.states) ** 2, axis=0)]
        err = None if math.isfinite(mse) else "non-finite trajectory"
    except (TrainingError, ArithmeticError, FloatingPointError) as exc:
        res, mse, log_mse, coord, err = None, math.inf, math.inf, [], f"{type(exc).__name__}: {exc}"
    out = ExperimentResult(method, system, n_points, sigma, seed, mse, log_mse, coord,
                           time.perf_counter() - start, cfg.lambda_extra, err)
    return out, res


def _run_job(job):
    return run_experiment(*job[:5], mode=job[5], config=job[6])[0]


@dataclass
class SweepReport:
    results: list                     # ExperimentResult
    cells: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.cells:
            self.cells = aggregate(self.results)

    def to_json(self) -> dict:
        nested: dict = {}
        for (system, method, n, sigma, lam), cell in sorted(self.cells.items(), key=_cell_key):
            key = method if lam is None else f"{method}@lambda_extra={lam:g}"
            nested.setdefault(system, {}).setdefault(f"sigma={sigma:g}", {}).setdefault(key, {})[str(n)] = cell
        return {"cells": nested, "runs": [_result_dict(r) for r in self.results]}

    def write(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        j = out_dir / "report.json"
        j.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True, default=_json_default) + "\n")
        c = out_dir / "runs.csv"
        lines = ["system,method,n_points,sigma,seed,mse,log_mse"]
        for r in self.results:
            lines.append(f"{r.system},{r.method},{r.n_points},{r.noise_sigma:g},{r.seed},"
                         f"{_num(r.mse)},{_num(r.log_mse)}")
        c.write_text("\n".join(lines) + "\n")
        return [j, c]


def _num(v: float) -> str:
    return "inf" if not math.isfinite(v) else f"{v:.17g}"


def _json_default(v):
    if isinstance(v, float) and not math.isfinite(v):
        return "inf"
    raise TypeError(type(v))


def _result_dict(r: ExperimentResult) -> dict:
    d = asdict(r)
    for k in ("mse", "log_mse"):
        if not math.isfinite(d[k]):
            d[k] = "inf"
    d.pop("wall_time")  # keep report files reproducible byte for byte
    return d


def _cell_key(item):
    (system, method, n, sigma, lam), _ = item
    return (system, method, sigma, -1.0 if lam is None else lam, n)


def aggregate(results, by_lambda: bool | None = None) -> dict:
    """Mean/min/max log-MSE per (system, method, n, sigma[, lambda]) cell.

    A failed run is kept: it makes the cell's max +inf and is counted in
    ``failures``; the mean covers the finished runs.
    """
    if by_lambda is None:
        lams = {r.lambda_extra for r in results if r.method == "dhh"}
        by_lambda = len(lams) > 1
    cells: dict = {}
    for r in results:
        lam = r.lambda_extra if (by_lambda and r.method == "dhh") else None
        cells.setdefault((r.system, r.method, r.n_points, r.noise_sigma, lam), []).append(r)
    out = {}
    for key, rs in cells.items():
        vals = np.array([r.log_mse for r in rs], dtype=np.float64)
        ok = vals[np.isfinite(vals)]
        mean = float(np.mean(ok)) if ok.size else math.inf
        out[key] = {"mean": mean, "min": float(np.min(vals)),
                    "max": float(np.max(vals)), "seeds": [r.seed for r in rs],
                    "failures": int(sum(r.failed for r in rs))}
    return out


def sweep(systems, methods, n_grid, noise_levels, seeds=5, mode: str = "regular",
          config: dict | None = None, lambda_extra_grid=None, jobs: int = 1,
          progress=None) -> SweepReport:
    """Full cross product of runs.  ``seeds`` is a count (0..n-1) or an explicit list.

    With ``lambda_extra_grid`` the dhh runs are repeated for each multiplier
    (ablation); other methods run once.
    """
    seed_list = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    if not (systems and methods and n_grid and noise_levels and seed_list):
        raise ValueError("sweep grids must be non-empty")
    jobs_list = []
    for system in systems:
        for sigma in noise_levels:
            for method in methods:
                lams = lambda_extra_grid if (method == "dhh" and lambda_extra_grid) else [None]
                for lam in lams:
                    cfg = dict(config or {})
                    if lam is not None:
                        cfg["lambda_extra"] = lam
                    for n in n_grid:
                        for seed in seed_list:
                            jobs_list.append((system, method, int(n), float(sigma), int(seed), mode, cfg))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_job, jobs_list))
    else:
        results = []
        for job in jobs_list:
            results.append(_run_job(job))
            if progress:
                progress(results[-1])
    return SweepReport(results, aggregate(results, by_lambda=bool(lambda_extra_grid)))
