"""Dense symmetric linear algebra for inverse-Hessian vector products.

Two routes to ``H^-1 v`` live here and are meant to check each other:
an eigendecomposition with an explicit conditioning policy, and a
matrix-free conjugate-gradient solver on the damped operator ``H + eps*I``.
"""
from __future__ import annotations

import dataclasses
import struct
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import (
    DimensionMismatch,
    DivergedNumerically,
    FormatError,
    IllConditioned,
    IndefiniteOperator,
    NonFiniteInput,
)
from .fsutil import atomic_write_bytes

EIG_MAGIC = b"IHAEIG1"

DAMPED = "damped"
LOW_RANK = "lowrank"


def symmetrize(m, mirror: str = "average") -> np.ndarray:
    """Return an exactly symmetric float64 copy of ``m``.

    ``mirror="upper"`` copies the upper triangle onto the lower one,
    ``"average"`` uses ``(m + m.T) / 2``.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise DimensionMismatch(f"expected a non-empty square matrix, got shape {a.shape}")
    if mirror == "upper":
        upper = np.triu(a)
        return upper + np.triu(a, 1).T
    if mirror == "average":
        return 0.5 * (a + a.T)
    raise ValueError(f"unknown mirror mode {mirror!r}")


@dataclasses.dataclass(frozen=True)
class ConditioningPolicy:
    """How near-zero or negative Hessian eigenvalues are handled.

    ``damped`` shifts every eigenvalue by ``epsilon``; ``lowrank`` keeps only
    eigenpairs with eigenvalue strictly above ``epsilon``.
    """

    mode: str = DAMPED
    epsilon: float = 0.2

    def __post_init__(self):
        if self.mode not in (DAMPED, LOW_RANK):
            raise ValueError(f"unknown conditioning mode {self.mode!r}")
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise ValueError("epsilon must be finite and nonnegative")
        if self.mode == LOW_RANK and self.epsilon <= 0:
            raise ValueError("low-rank conditioning needs epsilon > 0")

    @classmethod
    def damped(cls, epsilon: float = 0.2) -> "ConditioningPolicy":
        return cls(DAMPED, float(epsilon))

    @classmethod
    def low_rank(cls, epsilon: float) -> "ConditioningPolicy":
        return cls(LOW_RANK, float(epsilon))

    def to_dict(self) -> dict:
        return {"mode": self.mode, "epsilon": self.epsilon}


@dataclasses.dataclass(frozen=True)
class EigenDecomposition:
    """Eigenpairs of a symmetric matrix, eigenvalues sorted descending.

    ``eigenvectors[:, i]`` pairs with ``eigenvalues[i]``.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.eigenvalues, dtype=np.float64)
        vecs = np.asarray(self.eigenvectors, dtype=np.float64)
        if vals.ndim != 1 or vecs.shape != (vals.size, vals.size):
            raise DimensionMismatch("eigenvector matrix must be square and match the eigenvalues")
        vals.setflags(write=False)
        vecs.setflags(write=False)
        object.__setattr__(self, "eigenvalues", vals)
        object.__setattr__(self, "eigenvectors", vecs)

    @property
    def dim(self) -> int:
        return self.eigenvalues.size

    def reconstruct(self) -> np.ndarray:
        u = self.eigenvectors
        return symmetrize((u * self.eigenvalues) @ u.T)

    def save(self, path) -> None:
        path = Path(path)
        payload = b"".join(
            [
                EIG_MAGIC,
                struct.pack("<Q", self.dim),
                self.eigenvalues.astype("<f8").tobytes(),
                self.eigenvectors.astype("<f8").tobytes(order="F"),
            ]
        )
        atomic_write_bytes(path, payload)

    @classmethod
    def load(cls, path) -> "EigenDecomposition":
        raw = Path(path).read_bytes()
        head = len(EIG_MAGIC) + 8
        if len(raw) < head or raw[: len(EIG_MAGIC)] != EIG_MAGIC:
            raise FormatError(f"{path}: not an eigendecomposition file")
        (dim,) = struct.unpack("<Q", raw[len(EIG_MAGIC) : head])
        expected = head + 8 * (dim + dim * dim)
        if len(raw) != expected:
            raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
        vals = np.frombuffer(raw, dtype="<f8", count=dim, offset=head).astype(np.float64)
        vecs = np.frombuffer(raw, dtype="<f8", count=dim * dim, offset=head + 8 * dim)
        vecs = vecs.reshape((dim, dim), order="F").astype(np.float64)
        return cls(vals, vecs)


def sym_eigendecompose(m) -> EigenDecomposition:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise DimensionMismatch(f"expected a non-empty square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteInput("matrix contains NaN or infinite entries")
    # eigh reads one triangle only; symmetrize so the result describes ``a`` itself
    vals, vecs = np.linalg.eigh(symmetrize(a))
    order = np.argsort(vals, kind="stable")[::-1]
    return EigenDecomposition(vals[order], vecs[:, order])


def _inverse_spectrum(decomp: EigenDecomposition, policy: ConditioningPolicy) -> np.ndarray:
    sigma = decomp.eigenvalues
    if policy.mode == DAMPED:
        shifted = sigma + policy.epsilon
        if shifted.size and shifted.min() <= 0:
            raise IllConditioned(
                f"smallest damped eigenvalue {shifted.min():.3e} is not positive "
                f"(epsilon={policy.epsilon})"
            )
        return 1.0 / shifted
    keep = sigma > policy.epsilon
    inv = np.zeros_like(sigma)
    inv[keep] = 1.0 / sigma[keep]
    return inv


def retained_modes(decomp: EigenDecomposition, policy: ConditioningPolicy) -> np.ndarray:
    """Boolean mask of eigenpairs that survive the policy."""
    if policy.mode == DAMPED:
        return np.ones(decomp.dim, dtype=bool)
    return decomp.eigenvalues > policy.epsilon


def conditioned_inverse_apply(
    decomp: EigenDecomposition, policy: ConditioningPolicy, v
) -> np.ndarray:
    """Apply the conditioned inverse to ``v`` (a vector, or a matrix of column vectors)."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != decomp.dim:
        raise DimensionMismatch(f"vector has length {v.shape[0]}, decomposition has dim {decomp.dim}")
    u = decomp.eigenvectors
    inv = _inverse_spectrum(decomp, policy)
    coeff = u.T @ v
    if v.ndim == 1:
        return u @ (inv * coeff)
    return u @ (inv[:, None] * coeff)


@dataclasses.dataclass
class CGResult:
    x: np.ndarray
    converged: bool
    iterations: int
    residual_norm: float

    @property
    def not_converged(self) -> bool:
        return not self.converged


def cg_solve(
    hvp: Callable[[np.ndarray], np.ndarray],
    b,
    damping: float = 0.0,
    tol: float = 1e-10,
    max_iter: int | None = None,
) -> CGResult:
    """Solve ``(A + damping*I) x = b`` by conjugate gradients.

    ``hvp`` applies the symmetric operator ``A``. Stops once the true residual
    satisfies ``||r|| <= tol * ||b||``; otherwise returns the best iterate with
    ``converged=False`` after ``max_iter`` operator applications.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    b = np.asarray(b, dtype=np.float64)
    if not np.all(np.isfinite(b)):
        raise NonFiniteInput("right-hand side contains NaN or infinite entries")
    n = b.size
    if max_iter is None:
        max_iter = max(10 * n, 100)

    def op(p):
        out = np.asarray(hvp(p), dtype=np.float64)
        if out.shape != p.shape:
            raise DimensionMismatch(f"operator returned shape {out.shape}, expected {p.shape}")
        return out + damping * p if damping else out

    b_norm = float(np.linalg.norm(b))
    x = np.zeros_like(b)
    if b_norm == 0.0:
        return CGResult(x, True, 0, 0.0)
    target = tol * b_norm

    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    best_x, best_res = x.copy(), b_norm
    it = 0
    while it < max_iter:
        ap = op(p)
        it += 1
        pap = float(p @ ap)
        if not np.isfinite(pap):
            raise DivergedNumerically(f"non-finite curvature at CG iteration {it}")
        if pap <= 0:
            raise IndefiniteOperator(f"p'Ap = {pap:.3e} <= 0 at CG iteration {it}")
        step = rr / pap
        x = x + step * p
        r = r - step * ap
        rr_new = float(r @ r)
        if not np.isfinite(rr_new):
            raise DivergedNumerically(f"non-finite residual at CG iteration {it}")
        if np.sqrt(rr_new) <= target:
            # the recurrence residual drifts; confirm against the true residual and restart if needed
            r = b - op(x)
            it += 1
            rr_new = float(r @ r)
            res = np.sqrt(rr_new)
            if res < best_res:
                best_x, best_res = x.copy(), res
            if res <= target:
                return CGResult(x, True, it, float(res))
            p = r.copy()
            rr = rr_new
            continue
        res = np.sqrt(rr_new)
        if res < best_res:
            best_x, best_res = x.copy(), res
        p = r + (rr_new / rr) * p
        rr = rr_new
    true_res = float(np.linalg.norm(b - op(best_x)))
    return CGResult(best_x, true_res <= target, it, true_res)
