"""Fixed-step explicit Runge-Kutta schemes."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .systems import PhaseState

SCHEMES = ("euler", "rk2", "rk4")
STAGES = {"euler": 1, "rk2": 2, "rk4": 4}


class IntegrationError(ArithmeticError):
    def __init__(self, message: str, t: float):
        super().__init__(f"{message} at t={t:.6g}")
        self.t = t


@dataclass(frozen=True)
class RolloutSpec:
    t_start: float
    t_end: float
    step: float
    scheme: str = "rk4"

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("step must be positive")
        if not self.t_end > self.t_start:
            raise ValueError("t_end must exceed t_start")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")

    @property
    def n_steps(self) -> int:
        # guard against 10/0.001 = 10000.000000000002
        return math.ceil((self.t_end - self.t_start) / self.step - 1e-9)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (T, 2d)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2 or len(self.times) != len(self.states):
            raise ValueError("times and states must align")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    def __len__(self):
        return len(self.times)

    @property
    def d(self) -> int:
        return self.states.shape[1] // 2

    def interpolate(self, times) -> np.ndarray:
        """Linear interpolation of every coordinate at ``times``."""
        times = np.asarray(times, dtype=np.float64)
        return np.stack([np.interp(times, self.times, self.states[:, c])
                         for c in range(self.states.shape[1])], axis=1)


def _checked(rhs, t, s):
    out = np.asarray(rhs(t, s), dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise IntegrationError("non-finite vector field", t)
    return out


def step(scheme: str, rhs, state, t: float, dt: float) -> np.ndarray:
    s = np.asarray(state, dtype=np.float64)
    if scheme == "euler":
        return s + dt * _checked(rhs, t, s)
    if scheme == "rk2":
        k1 = _checked(rhs, t, s)
        k2 = _checked(rhs, t + 0.5 * dt, s + 0.5 * dt * k1)
        return s + dt * k2
    if scheme == "rk4":
        k1 = _checked(rhs, t, s)
        k2 = _checked(rhs, t + 0.5 * dt, s + 0.5 * dt * k1)
        k3 = _checked(rhs, t + 0.5 * dt, s + 0.5 * dt * k2)
        k4 = _checked(rhs, t + dt, s + dt * k3)
        return s + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


def rollout(scheme: str, rhs, initial, spec: RolloutSpec) -> Trajectory:
    """Dense trajectory including both endpoints.

    The last step is shortened so the final time is exactly ``t_end``.
    """
    s = initial.flat() if isinstance(initial, PhaseState) else np.asarray(initial, dtype=np.float64)
    n = spec.n_steps
    times = np.empty(n + 1)
    states = np.empty((n + 1, s.size))
    times[0], states[0] = spec.t_start, s
    t = spec.t_start
    for i in range(1, n + 1):
        t_next = spec.t_end if i == n else spec.t_start + i * spec.step
        s = step(scheme, rhs, s, t, t_next - t)
        if not np.all(np.isfinite(s)):
            raise IntegrationError("state blew up", t_next)
        t = t_next
        times[i], states[i] = t, s
    return Trajectory(times, states)
