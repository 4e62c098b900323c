"""Minibatch SGD with heavy-ball momentum and L2 regularization.

The update is

    g_t = grad L(w_{t-1}) + alpha * w_{t-1} + minibatch noise
    h_t = mu * h_{t-1} + g_t
    w_t = w_{t-1} - lr * h_t

with the L2 term folded into the gradient (not decoupled weight decay).
"""
from __future__ import annotations

import dataclasses

import numpy as np

from . import model as M
from .errors import DivergedNumerically, InsufficientData

SHUFFLE = "shuffle"
IID = "iid"
DIVERGENCE_NORM = 1e8


@dataclasses.dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0
    sampling: str = SHUFFLE

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.sampling not in (SHUFFLE, IID):
            raise ValueError(f"unknown sampling mode {self.sampling!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True)
class SgdState:
    w: np.ndarray
    h: np.ndarray
    step_count: int = 0

    @classmethod
    def start(cls, w) -> "SgdState":
        w = np.array(w, dtype=np.float64)
        return cls(w, np.zeros_like(w), 0)


def sgd_step(state: SgdState, total_grad, cfg: SgdConfig) -> SgdState:
    """One momentum step. ``total_grad`` already includes ``alpha * w`` and batch noise."""
    g = np.asarray(total_grad, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise DivergedNumerically(f"non-finite gradient at step {state.step_count + 1}")
    h = cfg.momentum * state.h + g
    return SgdState(state.w - cfg.learning_rate * h, h, state.step_count + 1)


def _batches(rng, n: int, cfg: SgdConfig):
    per_epoch = n // cfg.batch_size
    for _ in range(cfg.epochs):
        if cfg.sampling == SHUFFLE:
            perm = rng.permutation(n)
            for b in range(per_epoch):
                yield perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
        else:
            for _ in range(per_epoch):
                yield rng.integers(0, n, size=cfg.batch_size)


def _run(spec, X, y, cfg, w0, rng, batches, on_step=None) -> np.ndarray:
    state = SgdState.start(w0)
    alpha = cfg.weight_decay
    for t, idx in enumerate(batches, start=1):
        g = M.mean_grad(spec, state.w, X[idx], y[idx])
        if alpha:
            g = g + alpha * state.w
        state = sgd_step(state, g, cfg)
        w = state.w
        if on_step is not None:
            on_step(t, w)
        elif t % 64 == 0 and not np.linalg.norm(w) < DIVERGENCE_NORM:
            raise DivergedNumerically(f"||w|| exceeded {DIVERGENCE_NORM:g} at step {t}")
    if not np.linalg.norm(state.w) < DIVERGENCE_NORM:
        raise DivergedNumerically(f"||w|| exceeded {DIVERGENCE_NORM:g}")
    return state.w


def train(spec: M.ModelSpec, dataset, mask=None, cfg: SgdConfig = SgdConfig(), init=None) -> np.ndarray:
    """Train on the records selected by ``mask`` (all records when ``mask`` is None).

    Runs ``epochs * floor(n_members / batch_size)`` steps; the result is a
    pure function of the arguments.
    """
    X, y = M.as_arrays(dataset)
    M.check_inputs(spec, X)
    if mask is not None:
        bits = getattr(mask, "bits", mask)
        sel = np.flatnonzero(np.asarray(bits, dtype=bool))
        X, y = X[sel], y[sel]
    n = X.shape[0]
    if n < cfg.batch_size:
        raise InsufficientData(f"{n} member records, batch size is {cfg.batch_size}")
    rng = np.random.default_rng([cfg.seed, 0])
    w0 = M.init_parameters(spec, cfg.seed) if init is None else init
    return _run(spec, X, y, cfg, w0, rng, _batches(rng, n, cfg))


def capture_trajectory(
    spec: M.ModelSpec,
    dataset,
    cfg: SgdConfig,
    burn_in: int,
    samples: int,
    thin: int = 1,
    init=None,
) -> np.ndarray:
    """Run SGD for ``burn_in + samples * thin`` steps and keep every ``thin``-th iterate after burn-in.

    Returns an array of shape ``(samples, num_params)``. ``cfg.epochs`` is
    ignored; the step count is set by the arguments.
    """
    if burn_in < 0 or samples < 0 or thin < 1:
        raise ValueError("burn_in and samples must be nonnegative, thin positive")
    if samples == 0:
        return np.empty((0, spec.num_params))
    X, y = M.as_arrays(dataset)
    M.check_inputs(spec, X)
    n = X.shape[0]
    if n < cfg.batch_size and cfg.sampling == SHUFFLE:
        raise InsufficientData(f"{n} records, batch size is {cfg.batch_size}")
    total = burn_in + samples * thin
    rng = np.random.default_rng([cfg.seed, 1])

    def batches():
        if cfg.sampling == IID:
            chunk = 4096
            for start in range(0, total, chunk):
                draws = rng.integers(0, n, size=(min(chunk, total - start), cfg.batch_size))
                yield from draws
        else:
            per_epoch = n // cfg.batch_size
            emitted = 0
            while emitted < total:
                perm = rng.permutation(n)
                for b in range(per_epoch):
                    if emitted == total:
                        return
                    emitted += 1
                    yield perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]

    out = np.empty((samples, spec.num_params))

    def keep(t, w):
        if t % 256 == 0 and not np.linalg.norm(w) < DIVERGENCE_NORM:
            raise DivergedNumerically(f"||w|| exceeded {DIVERGENCE_NORM:g} at step {t}")
        k = t - burn_in
        if k > 0 and k % thin == 0:
            out[k // thin - 1] = w

    w0 = M.init_parameters(spec, cfg.seed) if init is None else init
    _run(spec, X, y, cfg, w0, rng, batches(), on_step=keep)
    return out


def final_metrics(spec: M.ModelSpec, w, dataset, mask=None) -> dict:
    """Train/test loss and accuracy of ``w`` under a membership mask."""
    X, y = M.as_arrays(dataset)
    losses = M.per_example_losses(spec, w, X, y)
    out = {}
    if mask is None:
        groups = {"train": np.ones(len(y), dtype=bool)}
    else:
        bits = np.asarray(getattr(mask, "bits", mask), dtype=bool)
        groups = {"train": bits, "test": ~bits}
    for name, sel in groups.items():
        if sel.any():
            out[f"{name}_loss"] = float(losses[sel].mean())
            out[f"{name}_accuracy"] = M.accuracy(spec, w, X[sel], y[sel])
    return out
