"""Benchmark Hamiltonian systems and Hamilton's equations."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import diffcore as dc
from . import nets

KINDS = ("mass_spring", "pendulum", "n_body")


class SingularityError(ArithmeticError):
    """Two bodies coincide; the gravitational potential is undefined."""


@dataclass(frozen=True)
class PhaseState:
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        q = np.atleast_1d(np.asarray(self.q, dtype=np.float64))
        p = np.atleast_1d(np.asarray(self.p, dtype=np.float64))
        if q.shape != p.shape or q.ndim != 1 or q.size < 1:
            raise ValueError(f"q and p must be equal-length vectors, got {q.shape} and {p.shape}")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
            raise ValueError("non-finite phase state")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)

    @property
    def d(self) -> int:
        return self.q.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.q, self.p])

    @classmethod
    def from_flat(cls, s) -> "PhaseState":
        s = np.asarray(s, dtype=np.float64)
        d = s.size // 2
        return cls(s[:d], s[d:])


@dataclass(frozen=True)
class SystemSpec:
    kind: str
    m: float = 0.5
    k: float = 2.0
    l: float = 1.0
    g: float = 3.0
    G: float = 1.0
    n_bodies: int = 0
    masses: tuple = field(default=())

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown system {self.kind!r}; expected one of {KINDS}")
        if self.kind == "n_body":
            if self.n_bodies < 2:
                raise ValueError("n_body needs at least 2 bodies")
            if not self.masses:
                object.__setattr__(self, "masses", (1.0,) * self.n_bodies)
            elif len(self.masses) != self.n_bodies:
                raise ValueError("one mass per body")

    @property
    def d(self) -> int:
        return 2 * self.n_bodies if self.kind == "n_body" else 1

    @property
    def name(self) -> str:
        return f"{self.n_bodies}_body" if self.kind == "n_body" else self.kind

    def to_dict(self) -> dict:
        out = asdict(self)
        out["masses"] = list(self.masses)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SystemSpec":
        d = dict(d)
        d["masses"] = tuple(d.get("masses", ()))
        return cls(**d)


def make_system(name: str) -> SystemSpec:
    """Default benchmark parameters by name: mass_spring, pendulum, 2_body, 3_body."""
    if name == "mass_spring":
        return SystemSpec("mass_spring", m=0.5, k=2.0)
    if name == "pendulum":
        return SystemSpec("pendulum", m=0.5, l=1.0, g=3.0)
    if name in ("2_body", "3_body"):
        return SystemSpec("n_body", G=1.0, n_bodies=int(name[0]))
    raise ValueError(f"unknown system {name!r}; expected mass_spring, pendulum, 2_body or 3_body")


SYSTEM_NAMES = ("mass_spring", "pendulum", "2_body", "3_body")


def _split(spec: SystemSpec, s: np.ndarray):
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != 2 * spec.d:
        raise ValueError(f"{spec.name} state has {2 * spec.d} coordinates, got {s.shape[-1]}")
    return s[..., :spec.d], s[..., spec.d:]


def _pair_geometry(spec: SystemSpec, q: np.ndarray):
    pos = q.reshape(q.shape[:-1] + (spec.n_bodies, 2))
    diff = pos[..., :, None, :] - pos[..., None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    iu = np.triu_indices(spec.n_bodies, 1)
    if np.any(dist[..., iu[0], iu[1]] == 0.0):
        raise SingularityError("coincident bodies")
    return pos, diff, dist


def hamiltonian_true(spec: SystemSpec, state) -> float | np.ndarray:
    """Total energy.  Accepts a PhaseState, a flat ``(2d,)`` vector or a batch ``(B, 2d)``."""
    s = state.flat() if isinstance(state, PhaseState) else state
    q, p = _split(spec, s)
    if spec.kind == "mass_spring":
        return (0.5 * spec.k * q[..., 0] ** 2 + p[..., 0] ** 2 / (2 * spec.m))
    if spec.kind == "pendulum":
        return (2 * spec.m * spec.g * spec.l * (1 - np.cos(q[..., 0]))
                + spec.l ** 2 * p[..., 0] ** 2 / (2 * spec.m))
    masses = np.asarray(spec.masses)
    mom = p.reshape(p.shape[:-1] + (spec.n_bodies, 2))
    kinetic = np.sum(np.sum(mom * mom, axis=-1) / (2 * masses), axis=-1)
    _, _, dist = _pair_geometry(spec, q)
    potential = 0.0
    for i in range(spec.n_bodies):
        for j in range(i + 1, spec.n_bodies):
            potential = potential + spec.G * masses[i] * masses[j] / dist[..., i, j]
    return kinetic - potential


def hamiltonian_gradient(spec: SystemSpec, s) -> np.ndarray:
    """Analytic ``(dH/dq, dH/dp)`` concatenated, same layout as the state."""
    q, p = _split(spec, s)
    if spec.kind == "mass_spring":
        return np.concatenate([spec.k * q, p / spec.m], axis=-1)
    if spec.kind == "pendulum":
        return np.concatenate([2 * spec.m * spec.g * spec.l * np.sin(q),
                               spec.l ** 2 * p / spec.m], axis=-1)
    masses = np.asarray(spec.masses)
    mom = p.reshape(p.shape[:-1] + (spec.n_bodies, 2))
    dHdp = (mom / masses[:, None]).reshape(p.shape)
    _, diff, dist = _pair_geometry(spec, q)
    idx = np.arange(spec.n_bodies)
    dist = dist.copy()
    dist[..., idx, idx] = np.inf
    mm = masses[:, None] * masses[None, :]
    # d/dq_i of -G m_i m_j / r_ij = G m_i m_j (q_i - q_j) / r_ij^3
    dHdq = np.sum(spec.G * mm[..., None] * diff / dist[..., None] ** 3, axis=-2)
    return np.concatenate([dHdq.reshape(q.shape), dHdp], axis=-1)


class TrueHamiltonian:
    """Ground-truth energy function with analytic partials."""

    def __init__(self, spec: SystemSpec):
        self.spec = spec

    def __call__(self, s):
        return hamiltonian_true(self.spec, s)

    def gradient(self, s) -> np.ndarray:
        return hamiltonian_gradient(self.spec, s)


class LearnedHamiltonian:
    """A Hamiltonian network behind the same interface as :class:`TrueHamiltonian`.

    The value/gradient graph is compiled once per batch shape.
    """

    def __init__(self, params: nets.NetworkParams, config: nets.MlpConfig):
        self.params = params
        self.config = config
        self._net = nets.Mlp(config, "H")
        self._bound = self._net.bind(params)
        self._graphs = {}

    def _graph(self, shape):
        g = self._graphs.get(shape)
        if g is None:
            x = dc.var("s", shape)
            h = self._net.apply(x)
            (gx,) = dc.grad(dc.total(h), [x])
            g = self._graphs[shape] = (dc.ComputeGraph([h, gx]), x)
        return g

    def _eval(self, s):
        s = np.asarray(s, dtype=np.float64)
        g, _ = self._graph(s.shape)
        return g.evaluate({**self._bound, "s": s})

    def __call__(self, s):
        h, _ = self._eval(s)
        return h[..., 0]

    def gradient(self, s) -> np.ndarray:
        return self._eval(s)[1]


def hamilton_rhs(H, state):
    """Hamilton's equations: ``(dq/dt, dp/dt) = (dH/dp, -dH/dq)``.

    ``H`` is anything with a ``gradient(s)`` method (true or learned).
    Returns the same kind of object it was given (PhaseState or array).
    """
    if isinstance(state, PhaseState):
        return PhaseState.from_flat(hamilton_rhs(H, state.flat()))
    s = np.asarray(state, dtype=np.float64)
    gr = H.gradient(s)
    d = s.shape[-1] // 2
    return np.concatenate([gr[..., d:], -gr[..., :d]], axis=-1)


def vector_field(H):
    """``rhs(t, s)`` closure for the integrators."""
    return lambda t, s: hamilton_rhs(H, s)


def energy_rate(H, s) -> np.ndarray:
    """dH/dt along the Hamiltonian flow of ``H`` itself (zero up to rounding)."""
    s = np.asarray(s, dtype=np.float64)
    gr = H.gradient(s)
    f = hamilton_rhs(H, s)
    return np.sum(gr * f, axis=-1)


def sample_initial_state(spec: SystemSpec, rng: np.random.Generator) -> PhaseState:
    if spec.kind in ("mass_spring", "pendulum"):
        # area-uniform on the annulus 0.5 <= |(q, p)| <= 1.5
        r = np.sqrt(rng.uniform(0.5 ** 2, 1.5 ** 2))
        theta = rng.uniform(0.0, 2 * np.pi)
        return PhaseState([r * np.cos(theta)], [r * np.sin(theta)])
    return _near_circular(spec, rng)


def _near_circular(spec: SystemSpec, rng: np.random.Generator) -> PhaseState:
    n = spec.n_bodies
    masses = np.asarray(spec.masses)
    phase = rng.uniform(0.0, 2 * np.pi)
    angles = phase + 2 * np.pi * np.arange(n) / n
    pos = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    pos -= (masses[:, None] * pos).sum(0) / masses.sum()
    q = pos.reshape(-1)
    # speed that balances the inward pull for a circular orbit
    force = -hamiltonian_gradient(spec, np.concatenate([q, np.zeros(2 * n)]))[:2 * n].reshape(n, 2)
    radius = np.linalg.norm(pos, axis=1)
    radial = -np.sum(force * pos, axis=1) / radius
    speed = np.sqrt(np.maximum(radial, 0.0) * radius / masses)
    tangent = np.stack([-pos[:, 1], pos[:, 0]], axis=1) / radius[:, None]
    mom = masses[:, None] * speed[:, None] * tangent
    mom *= 1.0 + rng.uniform(-0.1, 0.1, size=(n, 1))
    mom -= masses[:, None] * mom.sum(0) / masses.sum()
    return PhaseState(q, mom.reshape(-1))


def min_pair_distance(spec: SystemSpec, states: np.ndarray) -> float:
    if spec.kind != "n_body":
        return np.inf
    q = np.asarray(states)[..., :spec.d]
    pos = q.reshape(q.shape[:-1] + (spec.n_bodies, 2))
    best = np.inf
    for i in range(spec.n_bodies):
        for j in range(i + 1, spec.n_bodies):
            best = min(best, float(np.min(np.linalg.norm(pos[..., i, :] - pos[..., j, :], axis=-1))))
    return best
