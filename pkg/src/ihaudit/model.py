"""Small differentiable models with exact first and second derivatives.

Two architectures are supported: a bias-free linear map and a fully
connected network (``mlp``). Gradients come from ordinary backpropagation;
Hessian-vector products use the R-operator, i.e. forward-mode
differentiation of the backward pass, so curvature is exact (no
Gauss-Newton shortcut) for both squared and cross-entropy losses.

Parameter layout: layers in forward order; within a layer the weight
matrix of shape ``(fan_out, fan_in)`` in row-major order, followed by the
bias vector. The linear architecture has no bias.
"""
from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import DimensionMismatch, EmptyDataset, FormatError, HessianTooLarge
from .fsutil import atomic_write_bytes
from .linalg import symmetrize

LINEAR = "linear"
MLP = "mlp"
SQUARED = "squared"
CROSS_ENTROPY = "cross_entropy"

PARAM_MAGIC = b"IHAPAR1"
DEFAULT_HESSIAN_BUDGET = 512 * 2**20  # bytes for one dense float64 matrix


@dataclasses.dataclass(frozen=True)
class ModelSpec:
    architecture: str
    input_dim: int
    output_dim: int = 1
    loss_kind: str = SQUARED
    hidden: tuple = ()
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.architecture not in (LINEAR, MLP):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.loss_kind not in (SQUARED, CROSS_ENTROPY):
            raise ValueError(f"unknown loss {self.loss_kind!r}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        if any(h < 1 for h in self.hidden):
            raise ValueError("layer widths must be positive")
        if self.architecture == LINEAR and self.hidden:
            raise ValueError("the linear architecture has no hidden layers")
        if self.architecture == MLP and not self.hidden:
            raise ValueError("an mlp needs at least one hidden layer")
        if self.loss_kind == CROSS_ENTROPY and self.output_dim < 2:
            raise ValueError("cross-entropy needs output_dim >= 2")

    @classmethod
    def linear(cls, input_dim: int, output_dim: int = 1) -> "ModelSpec":
        return cls(LINEAR, input_dim, output_dim, SQUARED)

    @classmethod
    def mlp(cls, input_dim, hidden, output_dim, loss_kind=CROSS_ENTROPY, activation="relu"):
        if isinstance(hidden, int):
            hidden = (hidden,)
        return cls(MLP, input_dim, output_dim, loss_kind, tuple(hidden), activation)

    @property
    def widths(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.output_dim]

    @property
    def has_bias(self) -> bool:
        return self.architecture == MLP

    def layer_shapes(self) -> list[tuple[tuple[int, int], int | None]]:
        return self._shapes

    @functools.cached_property
    def _shapes(self):
        w = self.widths
        return [((w[i + 1], w[i]), w[i + 1] if self.has_bias else None) for i in range(len(w) - 1)]

    @functools.cached_property
    def num_params(self) -> int:
        return sum(o * i + (b or 0) for (o, i), b in self.layer_shapes())

    def to_dict(self) -> dict:
        return dataclasses.asdict(self) | {"hidden": list(self.hidden)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**{**d, "hidden": tuple(d.get("hidden", ()))})

    def digest(self) -> bytes:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).digest()


@dataclasses.dataclass(frozen=True)
class Record:
    features: np.ndarray
    label: float


def _relu(z):
    return np.maximum(z, 0.0), (z > 0).astype(z.dtype), None


def _tanh(z):
    t = np.tanh(z)
    d1 = 1.0 - t * t
    return t, d1, -2.0 * t * d1


def _softplus(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return np.logaddexp(0.0, z), s, s * (1.0 - s)


# value, first derivative, second derivative (None when identically zero)
_ACTIVATIONS = {"relu": _relu, "tanh": _tanh, "softplus": _softplus}


def unpack(spec: ModelSpec, w) -> list[tuple[np.ndarray, np.ndarray | None]]:
    """Split a flat parameter vector into per-layer ``(W, b)`` views.

    A leading batch axis on ``w`` is preserved: ``w`` of shape ``(k, P)``
    yields weights of shape ``(k, fan_out, fan_in)``.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] != spec.num_params:
        raise DimensionMismatch(f"parameter vector has length {w.shape[-1]}, spec needs {spec.num_params}")
    lead = w.shape[:-1]
    layers, pos = [], 0
    for (o, i), nb in spec.layer_shapes():
        W = w[..., pos : pos + o * i].reshape(*lead, o, i)
        pos += o * i
        b = None
        if nb is not None:
            b = w[..., pos : pos + nb]
            pos += nb
        layers.append((W, b))
    return layers


def pack(spec: ModelSpec, layers) -> np.ndarray:
    parts = []
    for (W, b), (_, nb) in zip(layers, spec.layer_shapes()):
        lead = W.shape[:-2]
        parts.append(W.reshape(*lead, -1))
        if nb is not None:
            parts.append(b)
    return np.concatenate(parts, axis=-1)


def init_parameters(spec: ModelSpec, seed: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
    rng = np.random.default_rng(seed)
    layers = []
    for (o, i), nb in spec.layer_shapes():
        bound = 1.0 / np.sqrt(i)
        W = rng.uniform(-bound, bound, size=(o, i))
        b = rng.uniform(-bound, bound, size=nb) if nb is not None else None
        layers.append((W, b))
    return pack(spec, layers)


def as_arrays(records) -> tuple[np.ndarray, np.ndarray]:
    """Normalise a Dataset, a ``(X, y)`` pair, a Record or a list of Records."""
    if hasattr(records, "X") and hasattr(records, "y"):
        X, y = records.X, records.y
    elif isinstance(records, Record):
        X, y = records.features[None, :], np.asarray([records.label])
    elif isinstance(records, tuple) and len(records) == 2 and not isinstance(records[0], Record):
        X, y = records
    else:
        records = list(records)
        if not records:
            raise EmptyDataset("no records")
        X = np.stack([np.asarray(r.features, dtype=np.float64) for r in records])
        y = np.asarray([r.label for r in records])
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y)
    if y.ndim == 0:
        y = y[None]
    if X.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
    return X, y


def check_inputs(spec, X):
    if X.shape[1] != spec.input_dim:
        raise DimensionMismatch(f"features have dimension {X.shape[1]}, spec expects {spec.input_dim}")


def _targets(spec: ModelSpec, y: np.ndarray) -> np.ndarray:
    """Squared-loss targets as a ``(B, output_dim)`` array."""
    if spec.output_dim == 1:
        return np.asarray(y, dtype=np.float64).reshape(-1, 1)
    if y.ndim == 2:
        return np.asarray(y, dtype=np.float64)
    onehot = np.zeros((y.shape[0], spec.output_dim))
    onehot[np.arange(y.shape[0]), y.astype(np.int64)] = 1.0
    return onehot


def _forward(spec: ModelSpec, layers, X):
    act = _ACTIVATIONS[spec.activation]
    acts, zs, d1s, d2s = [X], [], [], []
    a = X
    for idx, (W, b) in enumerate(layers):
        z = a @ W.T
        if b is not None:
            z = z + b
        zs.append(z)
        if idx < len(layers) - 1:
            a, d1, d2 = act(z)
            acts.append(a)
            d1s.append(d1)
            d2s.append(d2)
    return acts, zs, d1s, d2s


def forward(spec: ModelSpec, w, X) -> np.ndarray:
    """Network outputs (logits for cross-entropy) for a batch of inputs."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    check_inputs(spec, X)
    return _forward(spec, unpack(spec, w), X)[1][-1]


def _losses_from_outputs(spec, out, y):
    if spec.loss_kind == CROSS_ENTROPY:
        lab = y.astype(np.int64)
        return logsumexp(out, axis=1) - out[np.arange(out.shape[0]), lab]
    return np.sum((out - _targets(spec, y)) ** 2, axis=1)


def _output_delta(spec, out, y):
    """Per-example derivative of the loss with respect to the outputs."""
    if spec.loss_kind == CROSS_ENTROPY:
        p = softmax(out, axis=1)
        p[np.arange(out.shape[0]), y.astype(np.int64)] -= 1.0
        return p
    return 2.0 * (out - _targets(spec, y))


def per_example_losses(spec: ModelSpec, w, X, y) -> np.ndarray:
    X, y = as_arrays((X, y))
    check_inputs(spec, X)
    return _losses_from_outputs(spec, forward(spec, w, X), y)


def per_example_grads(spec: ModelSpec, w, X, y, chunk: int = 4096) -> np.ndarray:
    """Gradient of each record's loss, shape ``(B, num_params)``."""
    X, y = as_arrays((X, y))
    check_inputs(spec, X)
    layers = unpack(spec, w)
    out = np.empty((X.shape[0], spec.num_params))
    for start in range(0, X.shape[0], chunk):
        sl = slice(start, start + chunk)
        acts, zs, d1s, _ = _forward(spec, layers, X[sl])
        delta = _output_delta(spec, zs[-1], y[sl])
        grads = []
        for l in range(len(layers) - 1, -1, -1):
            W, b = layers[l]
            gW = delta[:, :, None] * acts[l][:, None, :]
            grads.append((gW, delta if b is not None else None))
            if l > 0:
                delta = (delta @ W) * d1s[l - 1]
        out[sl] = pack(spec, grads[::-1])
    return out


def mean_loss_grad(spec: ModelSpec, w, X, y) -> tuple[float, np.ndarray]:
    """Mean loss and its gradient over a batch, without per-example storage."""
    X, y = as_arrays((X, y))
    if X.shape[0] == 0:
        raise EmptyDataset("cannot average over zero records")
    check_inputs(spec, X)
    return _mean_loss_grad(spec, w, X, y, with_loss=True)


def mean_grad(spec: ModelSpec, w, X, y) -> np.ndarray:
    """Gradient of the mean loss for pre-validated float arrays (training hot path)."""
    return _mean_loss_grad(spec, w, X, y, with_loss=False)[1]


def _mean_loss_grad(spec, w, X, y, with_loss):
    layers = unpack(spec, w)
    acts, zs, d1s, _ = _forward(spec, layers, X)
    n = X.shape[0]
    value = float(np.mean(_losses_from_outputs(spec, zs[-1], y))) if with_loss else None
    delta = _output_delta(spec, zs[-1], y) / n
    grads = []
    for l in range(len(layers) - 1, -1, -1):
        W, b = layers[l]
        grads.append((delta.T @ acts[l], delta.sum(axis=0) if b is not None else None))
        if l > 0:
            delta = (delta @ W) * d1s[l - 1]
    return value, pack(spec, grads[::-1])


def _hvp_block(spec, layers, X, y, V):
    """Hessian of the mean loss applied to each row of ``V`` (shape ``(k, P)``)."""
    n = X.shape[0]
    acts, zs, d1s, d2s = _forward(spec, layers, X)
    dirs = unpack(spec, V)
    k = V.shape[0]

    # forward R-pass
    r_acts = [None]
    r_zs = []
    for l, ((W, b), (VW, Vb)) in enumerate(zip(layers, dirs)):
        rz = acts[l] @ VW.transpose(0, 2, 1)
        if r_acts[l] is not None:
            rz = rz + r_acts[l] @ W.T
        if Vb is not None:
            rz = rz + Vb[:, None, :]
        r_zs.append(rz)
        if l < len(layers) - 1:
            r_acts.append(d1s[l] * rz)

    out = zs[-1]
    delta = _output_delta(spec, out, y)
    if spec.loss_kind == CROSS_ENTROPY:
        p = softmax(out, axis=1)
        rz = r_zs[-1]
        r_delta = p * (rz - np.sum(p * rz, axis=2, keepdims=True))
    else:
        r_delta = 2.0 * r_zs[-1]

    grads = []
    for l in range(len(layers) - 1, -1, -1):
        W, b = layers[l]
        VW, _ = dirs[l]
        rgW = r_delta.transpose(0, 2, 1) @ acts[l]
        if r_acts[l] is not None:
            rgW = rgW + delta.T @ r_acts[l]
        rgb = r_delta.sum(axis=1) if b is not None else None
        grads.append((rgW / n, rgb / n if rgb is not None else None))
        if l > 0:
            back = delta @ W
            r_back = r_delta @ W + delta @ VW
            r_delta = r_back * d1s[l - 1]
            if d2s[l - 1] is not None:
                r_delta = r_delta + back * d2s[l - 1] * r_zs[l - 1]
            delta = back * d1s[l - 1]
    return pack(spec, grads[::-1]).reshape(k, spec.num_params)


def hvp_arrays(spec: ModelSpec, w, X, y, v, block_elems: int = 4_000_000) -> np.ndarray:
    """``H(w) v`` for the mean unregularized loss over ``(X, y)``.

    ``v`` may be a vector or a ``(P, k)`` matrix of column directions.
    """
    X, y = as_arrays((X, y))
    if X.shape[0] == 0:
        raise EmptyDataset("cannot average over zero records")
    check_inputs(spec, X)
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != spec.num_params:
        raise DimensionMismatch(f"direction has length {v.shape[0]}, spec needs {spec.num_params}")
    layers = unpack(spec, w)
    V = v[None, :] if v.ndim == 1 else v.T
    width = max(spec.widths)
    k_block = max(1, block_elems // max(1, X.shape[0] * width))
    out = np.empty_like(V)
    for start in range(0, V.shape[0], k_block):
        out[start : start + k_block] = _hvp_block(spec, layers, X, y, V[start : start + k_block])
    return out[0] if v.ndim == 1 else out.T


def loss(spec: ModelSpec, w, z: Record) -> float:
    X, y = as_arrays(z)
    return float(per_example_losses(spec, w, X, y)[0])


def grad(spec: ModelSpec, w, z: Record) -> np.ndarray:
    X, y = as_arrays(z)
    return per_example_grads(spec, w, X, y)[0]


def dataset_loss_grad(spec: ModelSpec, w, records) -> tuple[float, np.ndarray]:
    X, y = as_arrays(records)
    return mean_loss_grad(spec, w, X, y)


def hvp(spec: ModelSpec, w, records, v) -> np.ndarray:
    X, y = as_arrays(records)
    return hvp_arrays(spec, w, X, y, v)


def exact_hessian(spec: ModelSpec, w, records, budget_bytes: int = DEFAULT_HESSIAN_BUDGET) -> np.ndarray:
    """Dense Hessian of the mean unregularized loss, built column by column from HVPs."""
    p = spec.num_params
    if 8 * p * p > budget_bytes:
        raise HessianTooLarge(
            f"a {p}x{p} Hessian needs {8 * p * p} bytes, budget is {budget_bytes}; use the CG path"
        )
    X, y = as_arrays(records)
    cols = hvp_arrays(spec, w, X, y, np.eye(p))
    return symmetrize(cols)


def predict(spec: ModelSpec, w, X) -> np.ndarray:
    out = forward(spec, w, X)
    if spec.output_dim == 1:
        return (out[:, 0] > 0.5).astype(np.int64)
    return np.argmax(out, axis=1)


def accuracy(spec: ModelSpec, w, X, y) -> float:
    y = np.asarray(y)
    if spec.output_dim == 1:
        return float(np.mean(predict(spec, w, X) == (y > 0.5)))
    return float(np.mean(predict(spec, w, X) == y.astype(np.int64)))


def save_parameters(path, spec: ModelSpec, w) -> None:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (spec.num_params,):
        raise DimensionMismatch("parameter vector does not match the spec")
    path = Path(path)
    payload = PARAM_MAGIC + spec.digest() + struct.pack("<Q", w.size) + w.astype("<f8").tobytes()
    atomic_write_bytes(path, payload)


def load_parameters(path, spec: ModelSpec | None = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    head = len(PARAM_MAGIC) + 32 + 8
    if len(raw) < head or raw[: len(PARAM_MAGIC)] != PARAM_MAGIC:
        raise FormatError(f"{path}: not a parameter file")
    digest = raw[len(PARAM_MAGIC) : len(PARAM_MAGIC) + 32]
    (length,) = struct.unpack("<Q", raw[len(PARAM_MAGIC) + 32 : head])
    if len(raw) != head + 8 * length:
        raise FormatError(f"{path}: truncated or padded payload")
    if spec is not None and (digest != spec.digest() or length != spec.num_params):
        raise FormatError(f"{path}: parameters were saved for a different model spec")
    return np.frombuffer(raw, dtype="<f8", offset=head).astype(np.float64)


def records_from_arrays(X, y) -> Sequence[Record]:
    return [Record(np.asarray(x, dtype=np.float64), lab) for x, lab in zip(X, y)]
