"""Losses, Adam and training loops for DHH and its baselines.

All losses are built as diffcore expressions from *model callables*: a
solution model maps a ``(B, 1)`` node of normalised times to ``(B, 2d)``
states, a Hamiltonian model maps ``(B, 2d)`` states to ``(B, 1)`` energies,
and a dynamics model maps ``(B, 2d)`` states to ``(B, 2d)`` derivatives.
``Mlp.apply`` is one such callable; tests plug in closed-form expressions.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from . import nets
from . import rng as rngs
from .data import Dataset, finite_difference_targets
from .systems import TrueHamiltonian, hamilton_rhs

METHODS = ("dhh", "hnn_fd", "hnn_oracle", "dhpm", "neural_ode")
NodeFn = Callable[[dc.Node], dc.Node]


class TrainingError(RuntimeError):
    """Training diverged; carries the step and the offending loss term."""

    def __init__(self, message: str, step: int | None = None, term: str | None = None):
        super().__init__(message)
        self.step = step
        self.term = term


# ---------------------------------------------------------------- config

def default_lambda_ham(system_name: str) -> float:
    return 0.1 if system_name in ("mass_spring", "pendulum") else 1.0


@dataclass
class TrainConfig:
    method: str = "dhh"
    lambda_fit: float = 1.0
    lambda_ham: float | None = None   # None -> 0.1 (1-dof systems) or 1.0 (n-body)
    lambda_extra: float = 0.01
    lambda_ode: float = 1.0           # dhpm residual weight
    lr_dynamics: float = 1e-4         # Hamiltonian and dynamics nets
    lr_solution: float = 1e-2
    steps: int = 20000
    K: int = 128
    M: int = 32
    seed: int = 0
    hamiltonian_hidden: tuple = (64, 64)
    solution_hidden: tuple = (64, 64, 64)
    dynamics_hidden: tuple = (64, 64)
    ode_max_substep: float = 0.1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {', '.join(METHODS)}; got {self.method!r}")
        for name in ("lambda_fit", "lambda_extra", "lambda_ode"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.lambda_ham is not None and self.lambda_ham < 0:
            raise ValueError("lambda_ham must be >= 0")
        if self.lr_dynamics <= 0 or self.lr_solution <= 0:
            raise ValueError("learning rates must be positive")
        if self.K < 1 or self.M < 1:
            raise ValueError("K and M must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        for name in ("hamiltonian_hidden", "solution_hidden", "dynamics_hidden"):
            setattr(self, name, tuple(int(h) for h in getattr(self, name)))

    def resolved_lambda_ham(self, system_name: str) -> float:
        return default_lambda_ham(system_name) if self.lambda_ham is None else self.lambda_ham

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown training config field(s): {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- loss builders

def time_derivative(solution_out: dc.Node, t: dc.Node) -> dc.Node:
    """``(B, 2d)`` derivative of a row-wise solution model w.r.t. its ``(B, 1)`` time input."""
    return nets.jacobian_nodes(solution_out, t)


def hamiltonian_field(hamiltonian: NodeFn, s: dc.Node) -> dc.Node:
    """``(dH/dp, -dH/dq)`` at each row of ``s``."""
    d = s.shape[1] // 2
    (gs,) = dc.grad(dc.total(hamiltonian(s)), [s])
    return dc.concat([dc.slice_(gs, 1, d, 2 * d), dc.neg(dc.slice_(gs, 1, 0, d))], axis=1)


def fit_term(pred: dc.Node, observed: dc.Node, mask) -> dc.Node:
    """Mean over observations of the squared error summed over observed coordinates."""
    n = pred.shape[0]
    r = (pred - observed) * dc.as_node(np.asarray(mask, dtype=np.float64).reshape(1, -1))
    return dc.total(dc.square(r)) / float(n)


def hnn_residual_term(solution: NodeFn, hamiltonian: NodeFn, t: dc.Node, scale: float = 1.0) -> dc.Node:
    """Hamilton's equations residual at collocation times ``t`` (normalised).

    ``scale`` converts d/dtau into d/dt_raw so the Hamiltonian lives in raw time units.
    """
    s = solution(t)
    ds = time_derivative(s, t) * scale
    r = ds - hamiltonian_field(hamiltonian, s)
    return dc.total(dc.square(r)) / float(t.shape[0])


def ode_residual_term(solution: NodeFn, dynamics: NodeFn, t: dc.Node, scale: float = 1.0) -> dc.Node:
    s = solution(t)
    ds = time_derivative(s, t) * scale
    r = ds - dynamics(s)
    return dc.total(dc.square(r)) / float(t.shape[0])


def energy_pair_term(solution: NodeFn, hamiltonian: NodeFn, t_i: dc.Node, t_j: dc.Node) -> dc.Node:
    h_i = hamiltonian(solution(t_i))
    h_j = hamiltonian(solution(t_j))
    return dc.total(dc.square(h_i - h_j)) / float(t_i.shape[0])


def derivative_match_term(hamiltonian: NodeFn, states: dc.Node, targets: dc.Node) -> dc.Node:
    """HNN loss with given state-derivative targets."""
    r = targets - hamiltonian_field(hamiltonian, states)
    return dc.total(dc.square(r)) / float(states.shape[0])


def rk2_unrolled(dynamics: NodeFn, s: dc.Node, h: dc.Node, n_sub: int) -> dc.Node:
    """Midpoint-rule prediction after ``n_sub`` steps of per-row size ``h`` ``(B, 1)``."""
    for _ in range(n_sub):
        k1 = dynamics(s)
        k2 = dynamics(s + 0.5 * h * k1)
        s = s + h * k2
    return s


# value-level wrappers --------------------------------------------------------

def _col(t) -> np.ndarray:
    return np.asarray(t, dtype=np.float64).reshape(-1, 1)


def _scalar(node: dc.Node, bindings) -> float:
    return float(dc.ComputeGraph(node).evaluate(bindings)[0])


def loss_fit(solution: NodeFn, dataset: Dataset) -> float:
    n = len(dataset.observations)
    if n == 0:
        raise ValueError("empty dataset")
    t = dc.var("t", (n, 1))
    so = dc.var("s_obs", dataset.observations.states.shape)
    node = fit_term(solution(t), so, dataset.mask)
    return _scalar(node, {"t": _col(dataset.tau), "s_obs": dataset.observed_states()})


def loss_hnn_residual(solution: NodeFn, hamiltonian: NodeFn, times, scale: float = 1.0) -> float:
    times = _col(times)
    t = dc.var("t", times.shape)
    return _scalar(hnn_residual_term(solution, hamiltonian, t, scale), {"t": times})


def loss_ode_residual(solution: NodeFn, dynamics: NodeFn, times, scale: float = 1.0) -> float:
    times = _col(times)
    t = dc.var("t", times.shape)
    return _scalar(ode_residual_term(solution, dynamics, t, scale), {"t": times})


def loss_extra(solution: NodeFn, hamiltonian: NodeFn, pairs) -> float:
    pairs = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    ti, tj = dc.var("ti", (len(pairs), 1)), dc.var("tj", (len(pairs), 1))
    node = energy_pair_term(solution, hamiltonian, ti, tj)
    return _scalar(node, {"ti": pairs[:, :1], "tj": pairs[:, 1:]})


def net_fn(params: nets.NetworkParams, config: nets.MlpConfig) -> NodeFn:
    """Model callable with the parameters frozen in as constants."""
    net = nets.Mlp(config)
    consts = {s.id: dc.const(a) for s, a in zip(net.slots, params.arrays())}

    def apply(x):
        out = net.apply(x)
        return _substitute(out, consts)
    return apply


def _substitute(root: dc.Node, mapping: dict) -> dc.Node:
    """Rebuild ``root`` with leaves replaced according to ``mapping`` (by node id)."""
    memo = dict(mapping)
    for n in dc._toposort([root]):
        if n.id in memo:
            continue
        if not n.inputs:
            memo[n.id] = n
            continue
        ins = tuple(memo[i.id] for i in n.inputs)
        if all(a is b for a, b in zip(ins, n.inputs)):
            memo[n.id] = n
        else:
            memo[n.id] = dc.Node(n.op, ins, n.shape, n.attrs)
    return memo[root.id]


# ---------------------------------------------------------------- sampling

def sample_collocation(K: int, rng: np.random.Generator) -> np.ndarray:
    if K < 1:
        raise ValueError("K must be >= 1")
    return rng.uniform(-1.0, 1.0, size=(K, 1))


def sample_pairs(M: int, rng: np.random.Generator) -> np.ndarray:
    """``(M, 2)`` pairs with the first time in [-1, 0] and the second in [0, 1]."""
    if M < 1:
        raise ValueError("M must be >= 1")
    return np.stack([rng.uniform(-1.0, 0.0, size=M), rng.uniform(0.0, 1.0, size=M)], axis=1)


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: list, grads: list, state: AdamState, lr: float, term: str = "loss"):
    """One bias-corrected Adam update; returns new params (state is updated in place)."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("gradient shapes do not match parameters")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient of {term}", state.t, term)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        out.append(p - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps))
    return out


# ---------------------------------------------------------------- training

CURVE_COLUMNS = ("step", "loss_total", "loss_fit", "loss_ham", "loss_extra")


@dataclass
class TrainResult:
    method: str
    config: TrainConfig
    nets: dict                 # role -> (NetworkParams, MlpConfig)
    curves: np.ndarray         # (steps, 5) as CURVE_COLUMNS
    wall_time: float = 0.0
    extras: dict = field(default_factory=dict)

    def write_curves(self, path) -> None:
        lines = [",".join(CURVE_COLUMNS)]
        for row in self.curves:
            lines.append(",".join([str(int(row[0]))] + [f"{v:.17g}" for v in row[1:]]))
        Path(path).write_text("\n".join(lines) + "\n")


class _Problem:
    """Compiled loss/gradient graph for one method and dataset."""

    def __init__(self, cfg: TrainConfig, ds: Dataset, configs: dict | None = None):
        self.cfg = cfg
        self.ds = ds
        d = ds.d
        self.roles: dict[str, nets.MlpConfig] = {}
        self.lr: dict[str, float] = {}
        m = cfg.method
        if m in ("dhh", "dhpm"):
            self.roles["solution"] = nets.solution_config(d, cfg.solution_hidden)
            self.lr["solution"] = cfg.lr_solution
        if m in ("dhh", "hnn_fd", "hnn_oracle"):
            self.roles["hamiltonian"] = nets.hamiltonian_config(d, cfg.hamiltonian_hidden)
            self.lr["hamiltonian"] = cfg.lr_dynamics
        if m in ("dhpm", "neural_ode"):
            self.roles["dynamics"] = nets.dynamics_config(d, cfg.dynamics_hidden)
            self.lr["dynamics"] = cfg.lr_dynamics
        for r, c in (configs or {}).items():
            if r not in self.roles:
                raise ValueError(f"{m} has no {r} network")
            self.roles[r] = c
        if m in ("hnn_fd", "hnn_oracle", "neural_ode") and not ds.fully_observed:
            raise ValueError(f"{m} needs fully observed states")
        self.mlps = {r: nets.Mlp(c, r) for r, c in self.roles.items()}
        self.static: dict[str, np.ndarray] = {}
        self.terms = getattr(self, "_build_" + m)()
        grads = dc.grad(self.terms[0], self.slots)
        self.graph = dc.ComputeGraph(list(self.terms) + grads)

    # builders return (total, fit, ham, extra)
    def _build_dhh(self):
        cfg, ds = self.cfg, self.ds
        lam_ham = cfg.resolved_lambda_ham(ds.system.name)
        sol, ham = self.mlps["solution"].apply, self.mlps["hamiltonian"].apply
        fit, t_col, ti, tj = self._common_fit()
        res = hnn_residual_term(sol, ham, t_col, ds.time_map.scale)
        extra = energy_pair_term(sol, ham, ti, tj)
        total = cfg.lambda_fit * fit + lam_ham * res + cfg.lambda_extra * extra
        return total, fit, res, extra

    def _build_dhpm(self):
        cfg, ds = self.cfg, self.ds
        sol, dyn = self.mlps["solution"].apply, self.mlps["dynamics"].apply
        fit, t_col, _, _ = self._common_fit()
        res = ode_residual_term(sol, dyn, t_col, ds.time_map.scale)
        total = cfg.lambda_fit * fit + cfg.lambda_ode * res
        return total, fit, res, dc.const(0.0)

    def _common_fit(self):
        cfg, ds = self.cfg, self.ds
        n, w = ds.observations.states.shape
        t_obs = dc.var("t_obs", (n, 1))
        s_obs = dc.var("s_obs", (n, w))
        self.static["t_obs"] = _col(ds.tau)
        self.static["s_obs"] = ds.observed_states()
        fit = fit_term(self.mlps["solution"].apply(t_obs), s_obs, ds.mask)
        t_col = dc.var("t_col", (cfg.K, 1))
        ti, tj = dc.var("t_i", (cfg.M, 1)), dc.var("t_j", (cfg.M, 1))
        return fit, t_col, ti, tj

    def _build_hnn(self, targets: np.ndarray):
        n, w = self.ds.observations.states.shape
        s = dc.var("s_obs", (n, w))
        tg = dc.var("targets", (n, w))
        self.static["s_obs"] = self.ds.observations.states
        self.static["targets"] = targets
        res = derivative_match_term(self.mlps["hamiltonian"].apply, s, tg)
        return res, dc.const(0.0), res, dc.const(0.0)

    def _build_hnn_fd(self):
        return self._build_hnn(finite_difference_targets(self.ds.observations))

    def _build_hnn_oracle(self):
        # simulator derivatives at the clean states behind each observation
        clean = self.ds.ground_truth.interpolate(self.ds.observations.times)
        return self._build_hnn(hamilton_rhs(TrueHamiltonian(self.ds.system), clean))

    def _build_neural_ode(self):
        obs = self.ds.observations
        gaps = np.diff(obs.times)
        n_sub = max(1, math.ceil(gaps.max() / self.cfg.ode_max_substep - 1e-9))
        b, w = len(gaps), obs.states.shape[1]
        s0, s1 = dc.var("s_start", (b, w)), dc.var("s_end", (b, w))
        h = dc.var("h", (b, 1))
        self.static.update(s_start=obs.states[:-1], s_end=obs.states[1:], h=_col(gaps / n_sub))
        pred = rk2_unrolled(self.mlps["dynamics"].apply, s0, h, n_sub)
        loss = dc.total(dc.square(pred - s1)) / float(b)
        self.n_substeps = n_sub
        return loss, loss, dc.const(0.0), dc.const(0.0)

    def needs_sampling(self) -> bool:
        return self.cfg.method in ("dhh", "dhpm")

    @property
    def slots(self) -> list:
        return [s for r in self.roles for s in self.mlps[r].slots]

    def bindings(self, params: dict, sampled: dict) -> dict:
        out = dict(self.static)
        out.update(sampled)
        for r, p in params.items():
            out.update(self.mlps[r].bind(p))
        return out

    def run(self, params: dict, sampled: dict):
        vals = self.graph.evaluate(self.bindings(params, sampled))
        return [float(v) for v in vals[:4]], vals[4:]


def init_networks(cfg: TrainConfig, roles: dict) -> dict:
    return {r: nets.init_params(c, rngs.stream(cfg.seed, f"init/{r}")) for r, c in roles.items()}


TERM_NAMES = ("total", "fit", "ham", "extra")


def train(cfg: TrainConfig, ds: Dataset, init: dict | None = None, callback=None) -> TrainResult:
    """Train one method on one dataset.

    ``init`` optionally maps a role to starting :class:`NetworkParams`; a
    network whose params carry their own config keeps that architecture.
    Raises :class:`TrainingError` (with step and term) on divergence.
    """
    start = time.perf_counter()
    init = init or {}
    prob = _Problem(cfg, ds, {r: p.config for r, p in init.items() if p.config is not None})
    params = init_networks(cfg, prob.roles)
    params.update({r: p.copy() for r, p in init.items()})
    adam = {r: AdamState.zeros_like(p.arrays()) for r, p in params.items()}
    gen = rngs.stream(cfg.seed, "collocation")
    curves = np.zeros((cfg.steps, 5))
    for it in range(cfg.steps):
        sampled = {}
        if prob.needs_sampling():
            sampled["t_col"] = sample_collocation(cfg.K, gen)
            pairs = sample_pairs(cfg.M, gen)
            sampled["t_i"], sampled["t_j"] = pairs[:, :1], pairs[:, 1:]
        losses, grads = prob.run(params, sampled)
        for name, v in sorted(zip(TERM_NAMES, losses), key=lambda nv: nv[0] == "total"):
            if not math.isfinite(v):
                raise TrainingError(f"loss term {name} became non-finite at step {it}", it, name)
        curves[it] = [it, *losses]
        offset = 0
        for r in prob.roles:
            p = params[r]
            k = len(p.arrays())
            new = adam_step(p.arrays(), grads[offset:offset + k], adam[r], prob.lr[r],
                            term=f"total loss ({r} net)")
            params[r] = nets.NetworkParams.from_arrays(new, prob.roles[r])
            offset += k
        if callback is not None:
            callback(it, losses)
    result = TrainResult(cfg.method, cfg, {r: (params[r], prob.roles[r]) for r in prob.roles},
                         curves, time.perf_counter() - start)
    if cfg.method == "neural_ode":
        result.extras["n_substeps"] = prob.n_substeps
    return result


def problem(cfg: TrainConfig, ds: Dataset, configs: dict | None = None) -> _Problem:
    """The compiled objective of ``cfg.method`` on ``ds`` (graph, slots, bindings)."""
    return _Problem(cfg, ds, configs)
