"""Observation datasets: ground truth, subsampling, noise, time normalisation."""
from __future__ import annotations

import json
from functools import lru_cache
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngs
from .integrators import RolloutSpec, Trajectory, rollout
from .systems import (PhaseState, SystemSpec, TrueHamiltonian, make_system,
                      min_pair_distance, sample_initial_state, vector_field)

__all__ = ["Trajectory", "TimeMap", "Dataset", "subsample", "add_noise", "normalize_time",
           "finite_difference_targets", "ground_truth", "build_dataset", "write_dataset",
           "read_dataset", "DEFAULT_SPANS", "GROUND_TRUTH_DT"]

GROUND_TRUTH_DT = 1e-3
DEFAULT_SPANS = {"mass_spring": (0.0, 10.0), "pendulum": (0.0, 10.0),
                 "2_body": (0.0, 10.0), "3_body": (0.0, 5.0)}
MIN_SEPARATION = 0.1
MAX_RETRIES = 100


@dataclass(frozen=True)
class TimeMap:
    """Affine map ``tau = scale * t + offset`` onto [-1, 1]."""

    scale: float
    offset: float

    def __call__(self, t):
        return self.scale * np.asarray(t, dtype=np.float64) + self.offset

    def inverse(self, tau):
        return (np.asarray(tau, dtype=np.float64) - self.offset) / self.scale

    def to_dict(self):
        return {"scale": self.scale, "offset": self.offset}


def normalize_time(traj: Trajectory) -> tuple[Trajectory, TimeMap]:
    t0, t1 = float(traj.times[0]), float(traj.times[-1])
    if not t1 > t0:
        raise ValueError("need at least two distinct times")
    scale = 2.0 / (t1 - t0)
    tmap = TimeMap(scale, -(t1 + t0) / (t1 - t0))
    tau = np.clip(tmap(traj.times), -1.0, 1.0)
    return Trajectory(tau, traj.states.copy()), tmap


def subsample(traj: Trajectory, n: int, mode: str, rng: np.random.Generator | None = None) -> Trajectory:
    L = len(traj)
    if n < 2 or n > L:
        raise ValueError(f"n must lie in [2, {L}], got {n}")
    if mode == "regular":
        idx = np.round(np.linspace(0, L - 1, n)).astype(int)
    elif mode == "irregular":
        if rng is None:
            raise ValueError("irregular sampling needs an rng")
        interior = np.sort(rng.choice(np.arange(1, L - 1), size=n - 2, replace=False))
        idx = np.concatenate([[0], interior, [L - 1]])
    else:
        raise ValueError(f"mode must be 'regular' or 'irregular', got {mode!r}")
    return Trajectory(traj.times[idx], traj.states[idx])


def add_noise(traj: Trajectory, sigma: float, rng: np.random.Generator) -> Trajectory:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return Trajectory(traj.times.copy(), traj.states.copy())
    return Trajectory(traj.times.copy(), traj.states + sigma * rng.standard_normal(traj.states.shape))


def finite_difference_targets(traj: Trajectory) -> np.ndarray:
    """Second-order state-derivative estimates on a (possibly nonuniform) grid.

    Three-point central formula inside, three-point one-sided at the ends;
    both are exact on quadratics.
    """
    if len(traj) < 3:
        raise ValueError("finite differences need at least 3 observations")
    return np.gradient(traj.states, traj.times, axis=0, edge_order=2)


def ground_truth(spec: SystemSpec, initial: PhaseState, t_span, dt: float = GROUND_TRUTH_DT) -> Trajectory:
    rhs = vector_field(TrueHamiltonian(spec))
    return rollout("rk4", rhs, initial, RolloutSpec(t_span[0], t_span[1], dt, "rk4"))


@dataclass
class Dataset:
    observations: Trajectory          # raw time, noisy
    mask: np.ndarray                  # (2d,) bool
    noise_sigma: float
    time_map: TimeMap
    ground_truth: Trajectory          # dense, clean; evaluation only
    system: SystemSpec
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (self.observations.states.shape[1],):
            raise ValueError("mask needs one flag per state coordinate")
        if not self.mask.any():
            raise ValueError("at least one coordinate must be observed")

    @property
    def d(self) -> int:
        return self.system.d

    @property
    def tau(self) -> np.ndarray:
        return np.clip(self.time_map(self.observations.times), -1.0, 1.0)

    @property
    def t_span(self) -> tuple[float, float]:
        return float(self.observations.times[0]), float(self.observations.times[-1])

    @property
    def fully_observed(self) -> bool:
        return bool(self.mask.all())

    def observed_states(self) -> np.ndarray:
        """Observations with hidden coordinates zeroed (they carry no information)."""
        return np.where(self.mask, self.observations.states, 0.0)


def _mask_for(d: int, observe: str) -> np.ndarray:
    if observe == "all":
        return np.ones(2 * d, dtype=bool)
    if observe == "q":
        return np.concatenate([np.ones(d, bool), np.zeros(d, bool)])
    if observe == "p":
        return np.concatenate([np.zeros(d, bool), np.ones(d, bool)])
    raise ValueError(f"observe must be 'all', 'q' or 'p', got {observe!r}")


@lru_cache(maxsize=64)
def _sample_ground_truth(spec: SystemSpec, seed: int, t_span):
    # cached: sweeps rebuild the same trajectory for every method; arrays are frozen
    s0, truth = _simulate(spec, seed, t_span)
    for a in (s0.q, s0.p, truth.times, truth.states):
        a.flags.writeable = False
    return s0, truth


def _simulate(spec: SystemSpec, seed: int, t_span):
    gen = rngs.stream(seed, "initial_state")
    for _ in range(MAX_RETRIES):
        s0 = sample_initial_state(spec, gen)
        truth = ground_truth(spec, s0, t_span)
        if min_pair_distance(spec, truth.states) >= MIN_SEPARATION:
            return s0, truth
    raise RuntimeError(f"no trajectory kept bodies {MIN_SEPARATION} apart after {MAX_RETRIES} draws")


def build_dataset(system: str | SystemSpec, n: int, mode: str = "regular", sigma: float = 0.0,
                  seed: int = 0, observe: str = "all", t_span=None) -> Dataset:
    """Pure function of its arguments: same inputs, bit-identical dataset."""
    spec = make_system(system) if isinstance(system, str) else system
    t_span = tuple(t_span or DEFAULT_SPANS[spec.name])
    s0, truth = _sample_ground_truth(spec, seed, t_span)
    return _assemble(spec, s0, truth, n, mode, sigma, seed, observe, t_span)


def _assemble(spec, s0, truth, n, mode, sigma, seed, observe, t_span):
    obs = subsample(truth, n, mode, rngs.stream(seed, "subsample"))
    obs = add_noise(obs, sigma, rngs.stream(seed, "noise"))
    _, tmap = normalize_time(obs)
    meta = {"system": spec.name, "params": spec.to_dict(), "sigma": sigma, "mode": mode,
            "seed": seed, "n": n, "observe": observe, "t_span": list(t_span),
            "initial_state": [float(v) for v in s0.flat()]}
    return Dataset(obs, _mask_for(spec.d, observe), sigma, tmap, truth, spec, meta)


# ---------------------------------------------------------------- files

def _fmt(v: float) -> str:
    return "nan" if not np.isfinite(v) else f"{v:.17g}"


def write_dataset(ds: Dataset, csv_path) -> tuple[Path, Path]:
    """CSV ``t,q1..qd,p1..pd`` plus a JSON sidecar; hidden coordinates are written as nan."""
    csv_path = Path(csv_path)
    d = ds.d
    header = ["t"] + [f"q{i + 1}" for i in range(d)] + [f"p{i + 1}" for i in range(d)]
    states = np.where(ds.mask, ds.observations.states, np.nan)
    lines = [",".join(header)]
    for t, row in zip(ds.observations.times, states):
        lines.append(",".join([_fmt(t)] + [_fmt(v) for v in row]))
    csv_path.write_text("\n".join(lines) + "\n")
    side = dict(ds.meta)
    side["time_map"] = ds.time_map.to_dict()
    side["mask"] = [bool(m) for m in ds.mask]
    sidecar = csv_path.with_suffix(".json")
    sidecar.write_text(json.dumps(side, indent=1, sort_keys=True) + "\n")
    return csv_path, sidecar


class DatasetFormatError(ValueError):
    pass


def read_dataset(csv_path) -> Dataset:
    """Load a dataset; the dense ground truth is regenerated from the sidecar."""
    csv_path = Path(csv_path)
    side = json.loads(csv_path.with_suffix(".json").read_text())
    for key in ("params", "sigma", "mode", "seed", "t_span", "initial_state", "mask", "time_map"):
        if key not in side:
            raise DatasetFormatError(f"sidecar is missing field {key!r}")
    spec = SystemSpec.from_dict(side["params"])
    lines = csv_path.read_text().strip().splitlines()
    header = lines[0].split(",")
    expected = ["t"] + [f"q{i + 1}" for i in range(spec.d)] + [f"p{i + 1}" for i in range(spec.d)]
    if header != expected:
        raise DatasetFormatError(f"CSV header {header} != {expected}")
    rows = np.array([[float(x) for x in line.split(",")] for line in lines[1:]])
    mask = np.asarray(side["mask"], dtype=bool)
    states = np.where(mask, rows[:, 1:], 0.0)
    obs = Trajectory(rows[:, 0], states)
    s0 = PhaseState.from_flat(side["initial_state"])
    truth = ground_truth(spec, s0, side["t_span"])
    tmap = TimeMap(float(side["time_map"]["scale"]), float(side["time_map"]["offset"]))
    meta = {k: side[k] for k in side if k not in ("time_map", "mask")}
    return Dataset(obs, mask, float(side["sigma"]), tmap, truth, spec, meta)
