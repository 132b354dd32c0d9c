"""Small dense networks with hand-written reverse mode, closed-form losses and Adam.

Parameters are kept as one flat float64 vector per network; ``MlpSpec`` knows
how to slice it into per-layer weight matrices and bias vectors.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

from .errors import ContractViolation, NumericError

LOG2 = float(np.log(2.0))
NET_SCHEMA = "worldenv-net-v1"
BCE_CLAMP = 1e-7

_ACTIVATIONS = ("tanh", "relu", "identity")


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths include the input and output widths: ``(in, h1, ..., out)``."""

    layer_widths: tuple[int, ...]
    activation: str = "tanh"
    output_activation: str = "identity"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 3:
            raise ContractViolation("an MLP needs at least one hidden layer")
        if any(w < 1 for w in widths):
            raise ContractViolation(f"layer widths must be >= 1, got {widths}")
        if self.activation not in _ACTIVATIONS or self.output_activation not in _ACTIVATIONS:
            raise ContractViolation(f"unknown activation in {self}")

    @property
    def n_in(self) -> int:
        return self.layer_widths[0]

    @property
    def n_out(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))

    def unflatten(self, data: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``(W, b)`` per layer; ``W`` has shape ``(fan_in, fan_out)``."""
        out = []
        k = 0
        w = self.layer_widths
        for i in range(len(w) - 1):
            n = w[i] * w[i + 1]
            W = data[k : k + n].reshape(w[i], w[i + 1])
            k += n
            b = data[k : k + w[i + 1]]
            k += w[i + 1]
            out.append((W, b))
        return out


@dataclass(frozen=True)
class ParamVector:
    spec: MlpSpec
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.shape != (self.spec.n_params,):
            raise ContractViolation(f"expected {self.spec.n_params} parameters, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise NumericError("parameter vector contains non-finite entries")
        object.__setattr__(self, "data", data)

    def with_data(self, data: np.ndarray) -> "ParamVector":
        return ParamVector(self.spec, data)

    def copy(self) -> "ParamVector":
        return ParamVector(self.spec, self.data.copy())


def init_params(spec: MlpSpec, rng: np.random.Generator) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    data = np.zeros(spec.n_params)
    for W, _ in spec.unflatten(data):
        limit = np.sqrt(6.0 / (W.shape[0] + W.shape[1]))
        W[...] = rng.uniform(-limit, limit, size=W.shape)
    return ParamVector(spec, data)


def zeros(spec: MlpSpec) -> ParamVector:
    return ParamVector(spec, np.zeros(spec.n_params))


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name: str, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - h * h
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    return np.ones_like(z)


@dataclass
class _Cache:
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)
    squeeze: bool = False


def forward_with_cache(params: ParamVector, x: np.ndarray) -> tuple[np.ndarray, _Cache]:
    spec = params.spec
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.n_in:
        raise ContractViolation(f"input width {x.shape[-1]} does not match spec width {spec.n_in}")
    cache = _Cache(squeeze=squeeze)
    layers = spec.unflatten(params.data)
    h = x
    for i, (W, b) in enumerate(layers):
        cache.inputs.append(h)
        z = h @ W + b
        name = spec.activation if i < len(layers) - 1 else spec.output_activation
        h = _act(name, z)
        cache.pre.append(z)
        cache.post.append(h)
    return (h[0] if squeeze else h), cache


def forward(params: ParamVector, x: np.ndarray) -> np.ndarray:
    return forward_with_cache(params, x)[0]


def backward(params: ParamVector, cache: _Cache, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vector-Jacobian product: returns (d params flat, d input)."""
    spec = params.spec
    layers = spec.unflatten(params.data)
    grad = np.zeros_like(params.data)
    glayers = spec.unflatten(grad)
    d = np.asarray(dy, dtype=np.float64)
    if cache.squeeze:
        d = d[None, :]
    for i in range(len(layers) - 1, -1, -1):
        name = spec.activation if i < len(layers) - 1 else spec.output_activation
        dz = d * _act_grad(name, cache.pre[i], cache.post[i])
        gW, gb = glayers[i]
        gW[...] = cache.inputs[i].T @ dz
        gb[...] = dz.sum(axis=0)
        d = dz @ layers[i][0].T
    return grad, (d[0] if cache.squeeze else d)


LossFn = Callable[[np.ndarray, Mapping[str, Any]], tuple[float, np.ndarray]]


def grad(params: ParamVector, loss_fn: LossFn, batch: Mapping[str, Any]) -> tuple[float, np.ndarray]:
    """Loss and exact gradient w.r.t. the flat parameters.

    ``loss_fn(outputs, batch)`` returns the mean batch loss together with its
    derivative w.r.t. ``outputs``; ``batch["x"]`` is the network input.
    """
    out, cache = forward_with_cache(params, batch["x"])
    loss, dout = loss_fn(out, batch)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    g, _ = backward(params, cache, dout)
    return float(loss), g


# --- closed-form losses -------------------------------------------------------

def laplace_logpdf(a, mu, beta) -> np.ndarray:
    """Sum over the last axis of independent Laplace log-densities with log-scale ``beta``."""
    a, mu, beta = (np.asarray(v, dtype=np.float64) for v in (a, mu, beta))
    return np.sum(-beta - LOG2 - np.abs(a - mu) * np.exp(-beta), axis=-1)


def laplace_logpdf_grad(a, mu, beta) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of ``laplace_logpdf`` w.r.t. ``mu`` and ``beta`` (elementwise)."""
    r = np.asarray(a, dtype=np.float64) - np.asarray(mu, dtype=np.float64)
    inv_b = np.exp(-np.asarray(beta, dtype=np.float64))
    return np.sign(r) * inv_b, -1.0 + np.abs(r) * inv_b


def laplace_nll(a_gt, mu, beta) -> np.ndarray:
    """Per-element ``|a - mu| exp(-beta) + beta + log 2`` averaged over the last axis."""
    a_gt, mu, beta = (np.asarray(v, dtype=np.float64) for v in (a_gt, mu, beta))
    return np.mean(np.abs(a_gt - mu) * np.exp(-beta) + beta + LOG2, axis=-1)


def l1_loss(a_gt, mu) -> np.ndarray:
    return np.mean(np.abs(np.asarray(a_gt, dtype=np.float64) - np.asarray(mu, dtype=np.float64)), axis=-1)


def bce_loss(p, y) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def sigmoid(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def bce_with_logits(z, y) -> tuple[np.ndarray, np.ndarray]:
    """BCE of ``sigmoid(z)`` against ``y`` and its derivative w.r.t. ``z``."""
    p = sigmoid(z)
    return bce_loss(p, y), p - np.asarray(y, dtype=np.float64)


# --- optimizer ----------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float | np.ndarray = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def create(n: int, lr: float | np.ndarray = 1e-3) -> "AdamState":
        return AdamState(np.zeros(n), np.zeros(n), 0, lr)


def adam_step(state: AdamState, params: np.ndarray, gradient: np.ndarray) -> tuple[AdamState, np.ndarray]:
    """One Adam update. ``lr`` may be a per-parameter array."""
    if gradient.shape != params.shape or state.m.shape != params.shape:
        raise ContractViolation("Adam moments, parameters and gradient must share a shape")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * gradient
    v = state.beta2 * state.v + (1.0 - state.beta2) * gradient * gradient
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps), new_params


# --- finite differences ---------------------------------------------------------

def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + h
        fp = f(x)
        x.flat[i] = orig - h
        fm = f(x)
        x.flat[i] = orig
        g.flat[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def check_grad(f: Callable[[np.ndarray], float], analytic: np.ndarray, x: np.ndarray, h: float = 1e-5) -> float:
    return relative_error(analytic, numeric_grad(f, x, h))


# --- checkpoints -------------------------------------------------------------------

def save_sections(path, sections: Mapping[str, ParamVector], meta: Mapping[str, Any] | None = None) -> None:
    """Write named networks: a JSON header line, then little-endian float64 payloads in order."""
    header = {
        "schema": NET_SCHEMA,
        "meta": dict(meta or {}),
        "sections": [
            {
                "name": name,
                "widths": list(pv.spec.layer_widths),
                "activation": pv.spec.activation,
                "output_activation": pv.spec.output_activation,
                "count": pv.spec.n_params,
            }
            for name, pv in sections.items()
        ],
    }
    buf = io.BytesIO()
    buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
    for pv in sections.values():
        buf.write(struct.pack(f"<{pv.spec.n_params}d", *pv.data))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_sections(path) -> tuple[dict[str, ParamVector], dict[str, Any]]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        header = json.loads(header_line)
        if header.get("schema") != NET_SCHEMA:
            raise ContractViolation(f"{path}: unexpected schema {header.get('schema')!r}")
        out = {}
        for sec in header["sections"]:
            spec = MlpSpec(tuple(sec["widths"]), sec["activation"], sec["output_activation"])
            raw = fh.read(8 * sec["count"])
            out[sec["name"]] = ParamVector(spec, np.frombuffer(raw, dtype="<f8").astype(np.float64))
    return out, header.get("meta", {})
