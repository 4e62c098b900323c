"""Membership scoring functions.

Every score follows one convention: larger means "more likely a member".

White-box scores (IHA, SIF) need a :class:`TargetContext` holding the
target's parameters, its training-set gradient and its Hessian (or an HVP
oracle for the conjugate-gradient route). Reference-model scores (LiRA,
L-attack, LiRA-L) work from per-record statistics of other models.
"""
from __future__ import annotations

import dataclasses
import warnings
from typing import Callable

import numpy as np
from scipy.special import expit, log_softmax
from scipy.stats import norm

from . import model as M
from .errors import InsufficientReferences, MissingContext
from .linalg import ConditioningPolicy, EigenDecomposition, cg_solve, conditioned_inverse_apply, sym_eigendecompose
from .training import SgdConfig, train

LOSS, I1, I2, I3, I4 = "loss", "i1", "i2", "i3", "i4"
ALL_TERMS = frozenset({LOSS, I1, I2, I3, I4})
RAW = "raw"
SIGMOID = "sigmoid"
EXACT_HESSIAN = "exact"
HVP_ONLY = "hvp"
ONLINE = "online"
OFFLINE = "offline"
VARIANCE_FLOOR = 1e-12


class LiraVarianceWarning(UserWarning):
    """A reference distribution had (near) zero variance and was clamped."""


def parse_terms(terms) -> frozenset:
    """Accept ``"all"``, a string like ``"loss,i1,i2"`` or ``"loss+i1+i2"``, or an iterable of names."""
    if isinstance(terms, str):
        text = terms.strip().lower()
        terms = ALL_TERMS if text == "all" else [t.strip() for t in text.replace("+", ",").split(",")]
    out = frozenset(str(t).lower() for t in terms)
    unknown = out - ALL_TERMS
    if unknown:
        raise ValueError(f"unknown IHA terms: {sorted(unknown)}")
    if not out:
        raise ValueError("at least one IHA term is required")
    return out


def terms_key(terms) -> str:
    order = [LOSS, I1, I2, I3, I4]
    return "+".join(t for t in order if t in terms)


@dataclasses.dataclass(frozen=True)
class IhaConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    n: int = 1
    batch_size: int = 32
    gamma: float = 0.5
    terms: frozenset = ALL_TERMS
    conditioning: ConditioningPolicy = ConditioningPolicy.damped(0.2)
    l0_fraction: float = 1.0
    output_mode: str = RAW
    l0_seed: int = 0
    cg_tol: float = 1e-10
    cg_max_iter: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "terms", parse_terms(self.terms))
        if not 0.0 < self.l0_fraction <= 1.0:
            raise ValueError("l0_fraction must lie in (0, 1]")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.output_mode not in (RAW, SIGMOID):
            raise ValueError(f"unknown output mode {self.output_mode!r}")
        if self.n < 1:
            raise ValueError("n must be positive")

    @classmethod
    def from_sgd(cls, cfg: SgdConfig, n: int, **kw) -> "IhaConfig":
        return cls(
            learning_rate=cfg.learning_rate,
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
            n=n,
            batch_size=cfg.batch_size,
            **kw,
        )

    @property
    def shrink(self) -> float:
        """``lr * alpha / (1 + mu)``, the regularisation correction shared by all four terms."""
        return self.learning_rate * self.weight_decay / (1.0 + self.momentum)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["terms"] = terms_key(self.terms)
        d["conditioning"] = self.conditioning.to_dict()
        return d


@dataclasses.dataclass(frozen=True)
class IhaTerms:
    loss_value: float
    i1: float
    i2: float
    i3: float
    i4: float


@dataclasses.dataclass
class TargetContext:
    """Precomputed state of one audited model.

    ``hessian`` is set in exact mode; in HVP mode inverse products run
    conjugate gradients against :meth:`hvp`. ``train_loss`` (mean member
    loss) doubles as the estimate of the stationary loss.
    """

    spec: M.ModelSpec
    w: np.ndarray
    X_train: np.ndarray
    y_train: np.ndarray
    grad_train: np.ndarray
    train_loss: float
    hessian: EigenDecomposition | None = None
    member_index: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.X_train.shape[0]

    @property
    def mode(self) -> str:
        return EXACT_HESSIAN if self.hessian is not None else HVP_ONLY

    def hvp(self, v) -> np.ndarray:
        return M.hvp_arrays(self.spec, self.w, self.X_train, self.y_train, v)

    def inverse(self, v, policy: ConditioningPolicy, tol: float = 1e-10, max_iter=None) -> np.ndarray:
        """Conditioned inverse Hessian applied to ``v`` (vector or ``(P, k)`` columns).

        In HVP mode the damping of ``policy`` becomes the CG shift; low-rank
        conditioning needs the eigendecomposition.
        """
        v = np.asarray(v, dtype=np.float64)
        if self.hessian is not None:
            return conditioned_inverse_apply(self.hessian, policy, v)
        if policy.mode != "damped":
            raise MissingContext("low-rank conditioning needs an exact Hessian")
        if v.ndim == 1:
            return self._cg(v, policy.epsilon, tol, max_iter)
        return np.stack([self._cg(col, policy.epsilon, tol, max_iter) for col in v.T], axis=1)

    def _cg(self, b, damping, tol, max_iter):
        res = cg_solve(self.hvp, b, damping=damping, tol=tol, max_iter=max_iter)
        if res.not_converged:
            warnings.warn(
                f"CG stopped after {res.iterations} iterations with residual {res.residual_norm:.3e}",
                RuntimeWarning,
                stacklevel=3,
            )
        return res.x


def prepare_target_context(
    spec: M.ModelSpec,
    w,
    dataset,
    mask,
    mode: str = EXACT_HESSIAN,
    budget_bytes: int = M.DEFAULT_HESSIAN_BUDGET,
) -> TargetContext:
    """Gradient of the member loss, plus the Hessian (exact mode) or an HVP oracle."""
    X, y = M.as_arrays(dataset)
    bits = np.asarray(getattr(mask, "bits", mask), dtype=bool)
    members = np.flatnonzero(bits)
    Xm, ym = X[members], y[members]
    w = np.asarray(w, dtype=np.float64)
    L, g = M.mean_loss_grad(spec, w, Xm, ym)
    hessian = None
    if mode == EXACT_HESSIAN:
        hessian = sym_eigendecompose(M.exact_hessian(spec, w, (Xm, ym), budget_bytes))
    elif mode != HVP_ONLY:
        raise ValueError(f"unknown context mode {mode!r}")
    return TargetContext(spec, w, Xm, ym, g, L, hessian, members)


def loss_attack(spec: M.ModelSpec, w, X, y=None) -> np.ndarray | float:
    """Negative loss. Accepts a single Record or a batch ``(X, y)``."""
    if y is None:
        return -M.loss(spec, w, X)
    return -M.per_example_losses(spec, w, X, y)


def sif_scores(ctx: TargetContext, X, y, policy: ConditioningPolicy) -> np.ndarray:
    """Self-influence ``g' H^-1 g`` of each record's own gradient."""
    G = M.per_example_grads(ctx.spec, ctx.w, X, y)
    A = ctx.inverse(G.T, policy)
    return np.einsum("pb,bp->b", A, G)


def sif_score(spec: M.ModelSpec, z, ctx: TargetContext, policy: ConditioningPolicy) -> float:
    g = M.grad(spec, ctx.w, z)
    return float(g @ ctx.inverse(g, policy))


def _partial_l0_grads(ctx: TargetContext, cfg: IhaConfig, record_ids, is_member, train_pos):
    """Per-record estimate of grad L0 from a random fraction of the other members.

    The subset mean is rescaled by ``(#others / n)`` so it estimates
    ``(1/n) * sum over others`` without bias. Subsets are drawn without
    replacement from a generator keyed by ``(l0_seed, record id)``.
    """
    n = ctx.n
    out = np.empty((ctx.grad_train.size, len(record_ids)))
    for k, (rid, mem, pos) in enumerate(zip(record_ids, is_member, train_pos)):
        others = np.arange(n) if not mem else np.delete(np.arange(n), pos)
        m = max(1, int(round(cfg.l0_fraction * others.size)))
        rng = np.random.default_rng([cfg.l0_seed, int(rid)])
        pick = rng.choice(others, size=m, replace=False)
        g = M.mean_grad(ctx.spec, ctx.w, ctx.X_train[pick], ctx.y_train[pick])
        out[:, k] = g * (others.size / n)
    return out


def iha_terms_batch(ctx: TargetContext, cfg: IhaConfig, X, y, is_member, record_ids=None) -> dict:
    """Loss and the four inverse-Hessian terms for a batch of candidate records.

    ``is_member`` says whether each record belongs to the target's training
    set, which fixes the leave-one-out gradient ``grad L0``. Returns a dict of
    arrays keyed ``loss``, ``i1`` .. ``i4``.
    """
    X, y = M.as_arrays((X, y))
    is_member = np.asarray(is_member, dtype=bool)
    n = cfg.n
    G = M.per_example_grads(ctx.spec, ctx.w, X, y)
    losses = M.per_example_losses(ctx.spec, ctx.w, X, y)
    inv = lambda v: ctx.inverse(v, cfg.conditioning, cfg.cg_tol, cfg.cg_max_iter)  # noqa: E731

    A = inv(G.T)  # H^-1 grad l(z), one column per record
    if cfg.l0_fraction < 1.0:
        if record_ids is None:
            raise MissingContext("partial-L0 needs dataset record ids to seed the subsets")
        train_pos = _train_positions(ctx, record_ids, is_member)
        B = inv(_partial_l0_grads(ctx, cfg, record_ids, is_member, train_pos))
    else:
        b_train = inv(ctx.grad_train)
        B = b_train[:, None] - np.where(is_member, 1.0 / n, 0.0) * A
    need_c = cfg.weight_decay != 0 and bool({I3, I4} & cfg.terms)
    C = inv(A) if need_c else np.zeros_like(A)

    s = cfg.shrink
    alpha = cfg.weight_decay
    return {
        LOSS: losses,
        I1: (1.0 - s) / n * np.einsum("pb,pb->b", A, A),
        I2: 2.0 * (1.0 - s) * np.einsum("pb,pb->b", B, A),
        I3: alpha / (2.0 * n) * (2.0 - s) * np.einsum("pb,pb->b", A, C),
        I4: alpha * (2.0 - s) * np.einsum("pb,pb->b", B, C),
    }


def _train_positions(ctx: TargetContext, record_ids, is_member):
    if ctx.member_index is None:
        raise MissingContext("context lacks member indices")
    lookup = {int(r): k for k, r in enumerate(ctx.member_index)}
    pos = []
    for rid, mem in zip(record_ids, is_member):
        if mem and int(rid) not in lookup:
            raise MissingContext(f"record {rid} is flagged a member but is not in the training set")
        pos.append(lookup.get(int(rid), -1))
    return pos


def iha_terms(spec: M.ModelSpec, z, ctx: TargetContext, cfg: IhaConfig, is_member: bool, record_id=None) -> IhaTerms:
    X, y = M.as_arrays(z)
    ids = None if record_id is None else [record_id]
    t = iha_terms_batch(ctx, cfg, X, y, [is_member], ids)
    return IhaTerms(*(float(t[k][0]) for k in (LOSS, I1, I2, I3, I4)))


def iha_score(terms, ctx: TargetContext | None, cfg: IhaConfig):
    """Combine terms into the attack score.

    ``terms`` is an :class:`IhaTerms` or the dict of arrays from
    :func:`iha_terms_batch`. Raw mode returns ``loss/(1+mu) - (1/lr) * sum(I)``
    over the masked terms; sigmoid mode rescales by ``S (1-mu) / (2 n L*)``,
    adds the prior log-odds and applies the logistic function.
    """
    if isinstance(terms, IhaTerms):
        terms = {LOSS: terms.loss_value, I1: terms.i1, I2: terms.i2, I3: terms.i3, I4: terms.i4}
    mu, lr = cfg.momentum, cfg.learning_rate
    raw = 0.0
    if LOSS in cfg.terms:
        raw = raw + np.asarray(terms[LOSS]) / (1.0 + mu)
    penalty = sum(np.asarray(terms[k]) for k in (I1, I2, I3, I4) if k in cfg.terms)
    raw = raw - penalty / lr
    if cfg.output_mode == RAW:
        return raw
    L_star = None if ctx is None else ctx.train_loss
    if L_star is None or not L_star > 0:
        raise MissingContext("sigmoid output needs a positive estimate of the stationary loss")
    scale = cfg.batch_size * (1.0 - mu) / (2.0 * cfg.n * L_star)
    return expit(scale * raw + np.log(cfg.gamma / (1.0 - cfg.gamma)))


def iha_scores(ctx: TargetContext, cfg: IhaConfig, X, y, is_member, record_ids=None):
    return iha_score(iha_terms_batch(ctx, cfg, X, y, is_member, record_ids), ctx, cfg)


# --------------------------------------------------------------------------
# reference-model attacks


def lira_statistic(spec: M.ModelSpec, w, X, y, kind: str = "loss") -> np.ndarray:
    """Per-record statistic for LiRA, oriented so that lower means member-like.

    ``loss`` is the per-record loss. ``logit`` is the negated logit-scaled
    confidence ``-log(p_y / (1 - p_y))`` of a softmax classifier.
    """
    if kind == "loss":
        return M.per_example_losses(spec, w, X, y)
    if kind == "logit":
        if spec.loss_kind != M.CROSS_ENTROPY:
            raise ValueError("logit-scaled confidence needs a softmax classifier")
        logp = log_softmax(M.forward(spec, w, X), axis=1)
        lp = logp[np.arange(len(y)), np.asarray(y, dtype=np.int64)]
        log1m = np.log(-np.expm1(np.minimum(lp, -1e-300)))
        return -(lp - log1m)
    raise ValueError(f"unknown LiRA statistic {kind!r}")


def _fit(stats):
    s = np.asarray(stats, dtype=np.float64)
    mean, var = s.mean(), s.var()
    clamped = var < VARIANCE_FLOOR
    if clamped:
        warnings.warn("reference variance clamped to the floor", LiraVarianceWarning, stacklevel=3)
        var = VARIANCE_FLOOR
    return mean, np.sqrt(var)


def lira_score(target_stat: float, in_stats, out_stats, mode: str = ONLINE) -> float:
    """Likelihood-ratio score against Gaussian fits of reference statistics.

    Online: ``log N(t; in) - log N(t; out)``. Offline: ``1 - Phi((t - mu_out) / s_out)``.
    """
    if len(out_stats) < 2:
        raise InsufficientReferences(f"{len(out_stats)} out-references, need at least 2")
    mu_out, s_out = _fit(out_stats)
    if mode == OFFLINE:
        return float(norm.sf(target_stat, loc=mu_out, scale=s_out))
    if mode != ONLINE:
        raise ValueError(f"unknown LiRA mode {mode!r}")
    if len(in_stats) < 2:
        raise InsufficientReferences(f"{len(in_stats)} in-references, need at least 2")
    mu_in, s_in = _fit(in_stats)
    return float(norm.logpdf(target_stat, mu_in, s_in) - norm.logpdf(target_stat, mu_out, s_out))


def lira_scores(target_stats, ref_stats, ref_in, mode: str = ONLINE, record_ids=None) -> np.ndarray:
    """Vectorised LiRA over records.

    ``ref_stats`` and ``ref_in`` have shape ``(n_refs, n_records)``; column
    ``j`` holds record ``j``'s statistic under each reference model and
    whether that model trained on it.
    """
    t = np.asarray(target_stats, dtype=np.float64)
    S = np.asarray(ref_stats, dtype=np.float64)
    IN = np.asarray(ref_in, dtype=bool)
    n_in, n_out = IN.sum(axis=0), (~IN).sum(axis=0)
    need_in = 2 if mode == ONLINE else 0
    bad = np.flatnonzero((n_out < 2) | (n_in < need_in))
    if bad.size:
        rid = bad[0] if record_ids is None else record_ids[bad[0]]
        raise InsufficientReferences(
            f"record {rid} has {n_in[bad[0]]} in- and {n_out[bad[0]]} out-references"
        )

    def fit(mask):
        cnt = mask.sum(axis=0)
        mean = np.where(mask, S, 0.0).sum(axis=0) / np.maximum(cnt, 1)
        var = np.where(mask, (S - mean) ** 2, 0.0).sum(axis=0) / np.maximum(cnt, 1)
        if np.any(var < VARIANCE_FLOOR):
            warnings.warn("reference variance clamped to the floor", LiraVarianceWarning, stacklevel=3)
        return mean, np.sqrt(np.maximum(var, VARIANCE_FLOOR))

    mu_out, s_out = fit(~IN)
    if mode == OFFLINE:
        return norm.sf(t, loc=mu_out, scale=s_out)
    mu_in, s_in = fit(IN)
    return norm.logpdf(t, mu_in, s_in) - norm.logpdf(t, mu_out, s_out)


def l_attack_score(target_loss: float, ref_losses) -> float:
    """Share of leave-one-out reference losses above the target's loss (ties count half)."""
    ref = np.asarray(ref_losses, dtype=np.float64)
    if ref.size < 2:
        raise InsufficientReferences(f"{ref.size} reference losses, need at least 2")
    return float((np.sum(ref > target_loss) + 0.5 * np.sum(ref == target_loss)) / ref.size)


def lira_l_score(target_loss: float, ref_losses) -> float:
    """Offline LiRA on leave-one-out reference losses."""
    return lira_score(target_loss, (), ref_losses, OFFLINE)


def loo_reference_losses(
    spec: M.ModelSpec,
    dataset,
    member_bits,
    record_index: int,
    cfg: SgdConfig,
    count: int,
    seed: int = 0,
    trainer: Callable = train,
) -> np.ndarray:
    """Losses of one record under ``count`` models trained on the member set without it.

    Reference models differ from each other only in their SGD seed.
    """
    bits = np.array(np.asarray(member_bits, dtype=bool))
    bits[record_index] = False
    X, y = M.as_arrays(dataset)
    out = np.empty(count)
    for k in range(count):
        ref_cfg = dataclasses.replace(cfg, seed=int(np.random.SeedSequence([seed, record_index, k]).generate_state(1)[0]))
        w = trainer(spec, (X, y), bits, ref_cfg)
        out[k] = M.per_example_losses(spec, w, X[record_index : record_index + 1], y[record_index : record_index + 1])[0]
    return out
