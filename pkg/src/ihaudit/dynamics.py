"""Stationary behaviour of momentum SGD near a minimum.

Closed forms for the minibatch noise covariance, the stationary parameter
covariance and the resulting log-posterior of the parameters, together with
Monte-Carlo estimators that check them against simulated SGD.
"""
from __future__ import annotations

import dataclasses
from typing import Callable

import numpy as np

from . import model as M
from .errors import DimensionMismatch, InsufficientSamples, InvalidBatch, UnstableRegime
from .linalg import (
    ConditioningPolicy,
    EigenDecomposition,
    conditioned_inverse_apply,
    retained_modes,
    sym_eigendecompose,
    symmetrize,
)
from .training import IID, SgdConfig, capture_trajectory

EXACT = ConditioningPolicy.damped(0.0)


@dataclasses.dataclass(frozen=True)
class StationaryContext:
    """Everything the closed forms need about the minimum SGD settles around.

    ``loss_fn`` maps ``w`` to ``(L(w), grad L(w))``; when omitted the exact
    quadratic ``L* + 0.5 (w - w*)' H (w - w*)`` is used.
    """

    w_star: np.ndarray
    L_star: float
    hessian: EigenDecomposition
    cfg: SgdConfig
    n: int = 0
    policy: ConditioningPolicy = EXACT
    loss_fn: Callable | None = None

    def __post_init__(self):
        w = np.asarray(self.w_star, dtype=np.float64)
        object.__setattr__(self, "w_star", w)
        if w.ndim != 1 or w.size != self.hessian.dim:
            raise DimensionMismatch("w_star length must equal the Hessian dimension")
        if not self.L_star >= 0:
            raise ValueError("L_star must be nonnegative")

    @classmethod
    def from_hessian(cls, w_star, L_star, H, cfg, n=0, policy=EXACT, loss_fn=None):
        return cls(w_star, float(L_star), sym_eigendecompose(H), cfg, n, policy, loss_fn)

    @property
    def dim(self) -> int:
        return self.hessian.dim

    def H(self) -> np.ndarray:
        return self.hessian.reconstruct()

    def loss_and_grad(self, w) -> tuple[float, np.ndarray]:
        if self.loss_fn is not None:
            value, g = self.loss_fn(w)
            return float(value), np.asarray(g, dtype=np.float64)
        delta = np.asarray(w, dtype=np.float64) - self.w_star
        Hd = self.H() @ delta
        return self.L_star + 0.5 * float(delta @ Hd), Hd


def _stability_factors(sigma, cfg: SgdConfig) -> np.ndarray:
    """``2 - lr (sigma + alpha) / (1 + mu)`` per eigenvalue; must be positive."""
    lr, mu, alpha = cfg.learning_rate, cfg.momentum, cfg.weight_decay
    return 2.0 - lr * (sigma + alpha) / (1.0 + mu)


def _check_stable(ctx: StationaryContext, keep=None):
    sigma = ctx.hessian.eigenvalues if keep is None else ctx.hessian.eigenvalues[keep]
    f = _stability_factors(sigma, ctx.cfg)
    if f.size and f.min() <= 0:
        raise UnstableRegime(
            f"lr * (sigma_max + alpha) / (1 + mu) = {2 - f.min():.4g} >= 2; SGD has no stationary state"
        )


def noise_covariance_theory(ctx: StationaryContext) -> np.ndarray:
    """Leading-order minibatch noise covariance ``(2 L*/S) H - (alpha^2/S) w* w*'``."""
    S, alpha = ctx.cfg.batch_size, ctx.cfg.weight_decay
    C = (2.0 * ctx.L_star / S) * ctx.H() - (alpha**2 / S) * np.outer(ctx.w_star, ctx.w_star)
    return symmetrize(C)


def noise_covariance_empirical(
    spec: M.ModelSpec, dataset, w, S: int, trials: int, seed: int = 0, chunk_elems: int = 2**22
) -> np.ndarray:
    """Sample covariance of minibatch gradient noise over ``trials`` batches.

    Batches of size ``S < n`` are drawn i.i.d. with replacement; a batch of
    size ``n`` is the whole training set, so its noise is exactly zero.
    """
    if trials < 2:
        raise InsufficientSamples("need at least two trials for a covariance")
    X, y = M.as_arrays(dataset)
    n = X.shape[0]
    if S < 1 or S > n:
        raise InvalidBatch(f"batch size {S} is outside [1, {n}]")
    G = M.per_example_grads(spec, w, X, y)
    gbar = G.mean(axis=0)
    p = G.shape[1]
    if S == n:
        return np.zeros((p, p))
    rng = np.random.default_rng(seed)
    total = np.zeros(p)
    outer = np.zeros((p, p))
    step = max(1, chunk_elems // (S * p))
    done = 0
    while done < trials:
        k = min(step, trials - done)
        idx = rng.integers(0, n, size=(k, S))
        eta = G[idx].mean(axis=1) - gbar
        total += eta.sum(axis=0)
        outer += eta.T @ eta
        done += k
    mean = total / trials
    return symmetrize((outer - trials * np.outer(mean, mean)) / (trials - 1))


def fluctuation_theory(ctx: StationaryContext) -> np.ndarray:
    """Stationary covariance of the SGD iterates for the leading-order noise.

    ``lr / (S (1 - mu)) * (2 L* H - alpha^2 w* w*') (H + alpha I)^-1
    (2 I - lr/(1+mu) (H + alpha I))^-1``. The rank-one ``alpha^2`` term
    breaks exact symmetry; the symmetric part is returned. Under low-rank
    conditioning the inverse of ``H + alpha I`` is taken on retained modes only.
    """
    cfg = ctx.cfg
    lr, mu, alpha, S = cfg.learning_rate, cfg.momentum, cfg.weight_decay, cfg.batch_size
    keep = retained_modes(ctx.hessian, ctx.policy)
    _check_stable(ctx, keep)
    sigma = ctx.hessian.eigenvalues
    U = ctx.hessian.eigenvectors
    shifted = sigma + alpha
    if ctx.policy.mode == "damped":
        shifted = shifted + ctx.policy.epsilon
    inv = np.zeros_like(sigma)
    inv[keep] = 1.0 / (shifted[keep] * _stability_factors(sigma[keep], cfg))
    right = (U * inv) @ U.T
    left = 2.0 * ctx.L_star * ctx.H() - alpha**2 * np.outer(ctx.w_star, ctx.w_star)
    return symmetrize(lr / (S * (1.0 - mu)) * left @ right)


def fluctuation_general(H, C, cfg: SgdConfig) -> np.ndarray:
    """Stationary covariance for an arbitrary noise covariance ``C`` commuting with ``H``.

    ``[lr A/(1+mu) (2I - lr A/(1+mu))]^-1 lr^2 C / (1 - mu^2)`` with
    ``A = H + alpha I``, evaluated by dense solves.
    """
    lr, mu, alpha = cfg.learning_rate, cfg.momentum, cfg.weight_decay
    H = np.asarray(H, dtype=np.float64)
    d = H.shape[0]
    B = lr * (H + alpha * np.eye(d)) / (1.0 + mu)
    K = B @ (2.0 * np.eye(d) - B)
    return np.linalg.solve(K, lr**2 * np.asarray(C) / (1.0 - mu**2))


def fluctuation_empirical(trajectory) -> np.ndarray:
    """Unbiased sample covariance of parameter snapshots (one per row)."""
    T = np.asarray(trajectory, dtype=np.float64)
    if T.ndim == 1:
        T = T[:, None]
    if T.shape[0] < 2:
        raise InsufficientSamples("need at least two snapshots")
    return np.atleast_2d(np.cov(T, rowvar=False, ddof=1))


def log_posterior_terms(w, ctx: StationaryContext) -> dict:
    """The five displayed terms of the SGD log-posterior at ``w``.

    Keys: ``log_loss`` (``-d/2 ln L*``), ``spectral``, ``distance``,
    ``curvature`` (the ``grad' H^-3 grad`` term) and ``loss_ratio``. Sums
    run over the modes the conditioning policy retains.
    """
    if not ctx.L_star > 0:
        raise ValueError("the log-posterior needs L* > 0")
    cfg = ctx.cfg
    lr, mu, alpha, S = cfg.learning_rate, cfg.momentum, cfg.weight_decay, cfg.batch_size
    keep = retained_modes(ctx.hessian, ctx.policy)
    _check_stable(ctx, keep)
    sigma = ctx.hessian.eigenvalues[keep]
    if sigma.size and sigma.min() <= 0:
        raise UnstableRegime("retained Hessian eigenvalues must be positive for the spectral term")
    w = np.asarray(w, dtype=np.float64)
    L_w, g = ctx.loss_and_grad(w)
    delta = w - ctx.w_star
    a = lr * alpha / (1.0 + mu)
    scale = S * (1.0 - mu)

    v = g
    for _ in range(3):
        v = conditioned_inverse_apply(ctx.hessian, ctx.policy, v)
    return {
        "log_loss": -0.5 * sigma.size * np.log(ctx.L_star),
        "spectral": float(np.sum(np.log(_stability_factors(sigma, cfg) * (sigma + alpha) / sigma))),
        "distance": -scale / (2.0 * lr) * (1.0 - a) * float(delta @ delta) / ctx.L_star,
        "curvature": -scale * alpha / (4.0 * lr) * (2.0 - a) * float(g @ v) / ctx.L_star,
        "loss_ratio": scale / (2.0 * (1.0 + mu)) * L_w / ctx.L_star,
    }


def log_posterior(w, ctx: StationaryContext) -> float:
    """Log-density of observing parameters ``w`` after SGD, up to additive constants."""
    return float(sum(log_posterior_terms(w, ctx).values()))


def gaussian_logpdf(w, mean, cov) -> float:
    d = np.asarray(w, dtype=np.float64) - mean
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise ValueError("covariance is not positive definite")
    return float(-0.5 * (d.size * np.log(2 * np.pi) + logdet + d @ np.linalg.solve(cov, d)))


# --------------------------------------------------------------------------
# simulation instances


@dataclasses.dataclass(frozen=True)
class QuadraticInstance:
    """A linear least-squares problem whose noise satisfies ``C = 2 L* H / S`` exactly at the OLS solution.

    Records are the product of ``2d`` feature points (``+-sqrt(d s_k) u_k``)
    with a symmetric set of residuals, so residuals are independent of
    features and the per-record gradient covariance factorises.
    """

    spec: M.ModelSpec
    X: np.ndarray
    y: np.ndarray
    w_ols: np.ndarray
    H: np.ndarray

    @property
    def dataset(self):
        return (self.X, self.y)

    def minimum(self, alpha: float = 0.0) -> np.ndarray:
        """Minimiser of ``L + alpha/2 ||w||^2``."""
        d = self.H.shape[0]
        return np.linalg.solve(self.H + alpha * np.eye(d), self.H @ self.w_ols)

    def loss_and_grad(self, w):
        return M.mean_loss_grad(self.spec, w, self.X, self.y)

    def context(self, cfg: SgdConfig) -> StationaryContext:
        w_star = self.minimum(cfg.weight_decay)
        L_star, _ = self.loss_and_grad(w_star)
        return StationaryContext.from_hessian(w_star, L_star, self.H, cfg, self.X.shape[0], loss_fn=self.loss_and_grad)


def quadratic_instance(
    hessian_eigenvalues=(10.0, 30.0),
    angle: float = np.pi / 4,
    w_ols=None,
    residual_scale: float = 1.0,
    n_residuals: int = 256,
    seed: int = 0,
) -> QuadraticInstance:
    sig = np.asarray(hessian_eigenvalues, dtype=np.float64)
    d = sig.size
    if d == 2:
        c, s = np.cos(angle), np.sin(angle)
        U = np.array([[c, -s], [s, c]])
    else:
        U, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(d, d)))
    second_moment = sig / 2.0  # H = 2 E[x x']
    pts = (np.sqrt(d * second_moment) * U).T
    feats = np.concatenate([pts, -pts])
    rng = np.random.default_rng(seed)
    half = rng.normal(size=n_residuals // 2)
    res = np.concatenate([half, -half])
    res *= residual_scale / np.sqrt(np.mean(res**2))
    w_ols = np.ones(d) if w_ols is None else np.asarray(w_ols, dtype=np.float64)
    X = np.repeat(feats, res.size, axis=0)
    r = np.tile(res, feats.shape[0])
    y = X @ w_ols - r
    H = U @ np.diag(sig) @ U.T
    return QuadraticInstance(M.ModelSpec.linear(d), X, y, w_ols, symmetrize(H))


def relative_frobenius(estimate, reference) -> float:
    return float(np.linalg.norm(np.asarray(estimate) - reference) / np.linalg.norm(reference))


def verify_noise(instance: QuadraticInstance, batch_size: int, trials: int, seed: int = 0) -> dict:
    cfg = SgdConfig(learning_rate=0.05, momentum=0.0, weight_decay=0.0, batch_size=batch_size)
    ctx = instance.context(cfg)
    theory = noise_covariance_theory(ctx)
    emp = noise_covariance_empirical(instance.spec, instance.dataset, ctx.w_star, batch_size, trials, seed)
    return {
        "check": "noise_covariance",
        "batch_size": batch_size,
        "trials": trials,
        "seed": seed,
        "L_star": ctx.L_star,
        "theory": theory.ravel().tolist(),
        "empirical": emp.ravel().tolist(),
        "relative_frobenius_error": relative_frobenius(emp, theory),
    }


def verify_fluctuation(
    instance: QuadraticInstance,
    cfg: SgdConfig,
    samples: int = 100_000,
    thin: int = 5,
    burn_in: int = 5_000,
) -> dict:
    cfg = dataclasses.replace(cfg, sampling=IID)
    ctx = instance.context(cfg)
    theory = fluctuation_theory(ctx)
    traj = capture_trajectory(instance.spec, instance.dataset, cfg, burn_in, samples, thin, init=ctx.w_star)
    emp = fluctuation_empirical(traj)
    per_entry = np.abs(emp - theory) / np.abs(theory)
    return {
        "check": "stationary_fluctuation",
        "config": cfg.to_dict(),
        "samples": samples,
        "thin": thin,
        "burn_in": burn_in,
        "theory": theory.ravel().tolist(),
        "empirical": emp.ravel().tolist(),
        "relative_frobenius_error": relative_frobenius(emp, theory),
        "max_relative_entry_error": float(per_entry.max()),
    }
