"""Tanh multilayer perceptrons expressed as diffcore expressions."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc

# all C-infinity; "square" lets polynomial Hamiltonians be represented exactly
ACTIVATIONS = {"tanh": dc.tanh, "sin": dc.sin, "square": dc.square}


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    output_dim: int
    hidden: tuple = (64, 64)
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        if any(h < 1 for h in self.hidden):
            raise ValueError(f"zero-width layer in {self.hidden}")
        if self.activation not in ACTIVATIONS:
            # piecewise-linear activations kill the second-order signal of the residual losses
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")

    @property
    def widths(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.output_dim]

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "output_dim": self.output_dim,
                "hidden": list(self.hidden), "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpConfig":
        return cls(int(d["input_dim"]), int(d["output_dim"]), tuple(d["hidden"]),
                   d.get("activation", "tanh"))


def hamiltonian_config(d: int, hidden=(64, 64)) -> MlpConfig:
    return MlpConfig(2 * d, 1, hidden)


def solution_config(d: int, hidden=(64, 64, 64)) -> MlpConfig:
    return MlpConfig(1, 2 * d, hidden)


def dynamics_config(d: int, hidden=(64, 64)) -> MlpConfig:
    return MlpConfig(2 * d, 2 * d, hidden)


@dataclass
class NetworkParams:
    """Per-layer weights ``(out, in)`` and biases ``(out,)``."""

    weights: list
    biases: list
    config: MlpConfig | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.config is not None:
            w = self.config.widths
            for i, (W, b) in enumerate(zip(self.weights, self.biases)):
                if W.shape != (w[i + 1], w[i]) or b.shape != (w[i + 1],):
                    raise ValueError(f"layer {i} shape {W.shape}/{b.shape} does not match config")

    def arrays(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    @classmethod
    def from_arrays(cls, arrays, config=None) -> "NetworkParams":
        return cls([np.array(a, dtype=np.float64) for a in arrays[0::2]],
                   [np.array(a, dtype=np.float64) for a in arrays[1::2]], config)

    def copy(self) -> "NetworkParams":
        return NetworkParams.from_arrays(self.arrays(), self.config)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def init_params(config: MlpConfig, seed) -> NetworkParams:
    """Glorot-uniform weights, zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    w = config.widths
    weights, biases = [], []
    for fan_in, fan_out in zip(w[:-1], w[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return NetworkParams(weights, biases, config)


class Mlp:
    """Symbolic handle on one network: parameter slots plus an ``apply`` builder.

    Slots are named ``{prefix}.W{i}`` / ``{prefix}.b{i}`` so several networks
    can live in one graph.
    """

    def __init__(self, config: MlpConfig, prefix: str = "net"):
        self.config = config
        self.prefix = prefix
        w = config.widths
        self.slots = []
        for i, (fan_in, fan_out) in enumerate(zip(w[:-1], w[1:])):
            self.slots.append(dc.var(f"{prefix}.W{i}", (fan_out, fan_in)))
            self.slots.append(dc.var(f"{prefix}.b{i}", (fan_out,)))

    def apply(self, x: dc.Node) -> dc.Node:
        """Batch ``(B, input_dim)`` -> ``(B, output_dim)``; a 1-d input gives a 1-d output."""
        if x.shape[-1] != self.config.input_dim:
            raise dc.ShapeError(f"{self.prefix}: input width {x.shape[-1]} != {self.config.input_dim}")
        act = ACTIVATIONS[self.config.activation]
        h = x
        n_layers = len(self.slots) // 2
        for i in range(n_layers):
            W, b = self.slots[2 * i], self.slots[2 * i + 1]
            if len(h.shape) == 1:
                h = dc.matmul(W, h) + b
            else:
                h = dc.matmul(h, dc.transpose(W)) + b
            if i < n_layers - 1:
                h = act(h)
        return h

    def bind(self, params: NetworkParams) -> dict:
        return {s.name: a for s, a in zip(self.slots, params.arrays())}


def forward(params: NetworkParams, config: MlpConfig, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    net = Mlp(config)
    xin = dc.var("x", x.shape)
    g = dc.ComputeGraph(net.apply(xin))
    return g.evaluate({**net.bind(params), "x": x})[0]


def jacobian_nodes(out: dc.Node, x: dc.Node) -> dc.Node:
    """Batched input Jacobian of a row-wise map.

    ``out`` is ``(B, m)`` computed row by row from ``x`` ``(B, n)``; the result
    is ``(B, m, n)`` flattened to ``(B, m * n)``.  One reverse pass per output
    column: rows are independent, so summing over the batch is exact.
    """
    cols = []
    m = out.shape[-1]
    for j in range(m):
        comp = dc.total(dc.slice_(out, len(out.shape) - 1, j, j + 1))
        (gx,) = dc.grad(comp, [x])
        cols.append(gx)
    return dc.concat(cols, axis=len(x.shape) - 1)


def input_jacobian(params: NetworkParams, config: MlpConfig, x) -> np.ndarray:
    """``output_dim x input_dim`` Jacobian at one input vector."""
    x = np.asarray(x, dtype=np.float64).reshape(1, config.input_dim)
    net = Mlp(config)
    xin = dc.var("x", x.shape)
    jac = jacobian_nodes(net.apply(xin), xin)
    val = dc.ComputeGraph(jac).evaluate({**net.bind(params), "x": x})[0]
    return val.reshape(config.output_dim, config.input_dim)


# ---------------------------------------------------------------- checkpoints

def params_to_json(params: NetworkParams, config: MlpConfig) -> dict:
    layers = []
    for W, b in zip(params.weights, params.biases):
        layers.append({"W": [[float(f"{v:.17g}") for v in row] for row in W],
                       "b": [float(f"{v:.17g}") for v in b]})
    return {"config": config.to_dict(), "layers": layers}


def params_from_json(d: dict) -> tuple[NetworkParams, MlpConfig]:
    config = MlpConfig.from_dict(d["config"])
    ws = [np.array(layer["W"], dtype=np.float64).reshape(-1, 1 if not layer["W"] else len(layer["W"][0]))
          for layer in d["layers"]]
    bs = [np.array(layer["b"], dtype=np.float64) for layer in d["layers"]]
    return NetworkParams(ws, bs, config), config


def save_checkpoint(path, nets: dict) -> None:
    """``nets`` maps a role name to ``(params, config)``."""
    doc = {role: params_to_json(p, c) for role, (p, c) in nets.items()}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path) -> dict:
    doc = json.loads(Path(path).read_text())
    return {role: params_from_json(d) for role, d in doc.items()}
