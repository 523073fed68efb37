"""Class-sensitive classification losses with exact gradients.

Every loss acts on the classifier head: features ``z`` (one row per sample),
last-layer weights ``W`` of shape (D, K) and bias ``b`` of shape (K,).
Probability-space losses (ce, wce, crwwce, wasserstein) consume
``softmax(z @ W + b)``. Angular losses (l2softmax, arcface, camri) consume the
cosines between the L2-normalized feature and the L2-normalized weight
columns, scaled by ``s``; they ignore the bias.

The batch loss is the mean of per-sample losses, and gradients are those of
the mean. A single-sample context (1-D ``z``, scalar ``t``) yields 1-D
``grad_z``.
"""

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from camri.errors import ConvergenceError, InvalidInputError
from camri.numerics import (
    ARCCOS_CLAMP,
    normalize_backward,
    normalize_rows,
    softmax,
    softmax_backward,
)
from camri.transport import (
    MARGINAL_SMOOTHING,
    SINKHORN_MAX_ITER,
    SINKHORN_TOL,
    sinkhorn_batch,
    smooth_marginal,
    entropy,
)

LOSS_KINDS = ("ce", "wce", "crwwce", "wasserstein", "l2softmax", "arcface", "camri")
ANGULAR_KINDS = frozenset({"l2softmax", "arcface", "camri"})

PROB_CLAMP = 1e-12
DEFAULT_LAMBDA = 0.1
LAMBDA_GRID = (0.05, 0.1, 0.5)
DEFAULT_SCALE = 16.0


@dataclass
class PenaltyConfig:
    """Loss kind plus every penalty parameter it may need.

    Unused fields stay ``None``. ``m`` always holds a length-K margin vector;
    ArcFace stores its scalar margin as ``m * ones(K)``.
    """

    kind: str
    K: int
    kappa: int = 0
    w: np.ndarray = None
    cfn: np.ndarray = None
    Cfp: np.ndarray = None
    C: np.ndarray = None
    m: np.ndarray = None
    s: float = 1.0
    lam: float = DEFAULT_LAMBDA
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise InvalidInputError(f"unknown loss kind {self.kind!r}")
        if not 0 <= self.kappa < self.K:
            raise InvalidInputError(f"kappa={self.kappa} outside 0..{self.K - 1}")
        for name in ("w", "cfn"):
            vec = getattr(self, name)
            if vec is not None:
                vec = np.asarray(vec, dtype=np.float64)
                if vec.shape != (self.K,) or np.any(vec < 0):
                    raise InvalidInputError(f"{name} must be a nonnegative length-{self.K} vector")
                setattr(self, name, vec)
        for name in ("Cfp", "C"):
            mat = getattr(self, name)
            if mat is not None:
                mat = np.asarray(mat, dtype=np.float64)
                if mat.shape != (self.K, self.K):
                    raise InvalidInputError(f"{name} must be {self.K}x{self.K}")
                if np.any(np.diag(mat) != 0) or np.any(mat < 0):
                    raise InvalidInputError(f"{name} needs zero diagonal, nonnegative entries")
                setattr(self, name, mat)
        if self.m is not None:
            m = np.asarray(self.m, dtype=np.float64)
            if m.shape != (self.K,) or np.any(m < 0) or np.any(m > math.pi / 2):
                raise InvalidInputError("margins must lie in [0, pi/2]")
            self.m = m
        if not self.s > 0:
            raise InvalidInputError("scale s must be positive")
        if self.kind == "wasserstein" and not self.lam > 0:
            raise InvalidInputError("lambda must be positive for the Wasserstein loss")

    @property
    def angular(self):
        return self.kind in ANGULAR_KINDS

    def param_json(self):
        """Canonical JSON of the grid parameters that produced this config."""
        return json.dumps(self.params, sort_keys=True)


@dataclass
class HeadContext:
    z: np.ndarray
    W: np.ndarray
    b: np.ndarray
    t: object

    def batched(self):
        z = np.asarray(self.z, dtype=np.float64)
        single = z.ndim == 1
        Z = z[None, :] if single else z
        t = np.atleast_1d(np.asarray(self.t, dtype=np.int64))
        W = np.asarray(self.W, dtype=np.float64)
        D, K = W.shape
        if Z.shape[1] != D or t.shape != (Z.shape[0],):
            raise InvalidInputError(f"context shapes disagree: z {z.shape}, W {W.shape}, t {t.shape}")
        if np.any(t < 0) or np.any(t >= K):
            raise InvalidInputError("label outside 0..K-1")
        b = np.zeros(K) if self.b is None else np.asarray(self.b, dtype=np.float64)
        if b.shape != (K,):
            raise InvalidInputError(f"bias must have length {K}")
        return Z, W, b, t, single


@dataclass
class LossOutput:
    loss: float
    grad_z: np.ndarray
    grad_W: np.ndarray
    grad_b: np.ndarray
    per_sample: np.ndarray = None
    sinkhorn_iterations: int = 0
    converged: bool = True


def _finish_affine(dO, per_sample, Z, W, single, **extra):
    n = Z.shape[0]
    g = dO / n
    grad_z = g @ W.T
    return LossOutput(
        loss=float(np.mean(per_sample)),
        grad_z=grad_z[0] if single else grad_z,
        grad_W=Z.T @ g,
        grad_b=g.sum(axis=0),
        per_sample=per_sample,
        **extra,
    )


def _log_softmax(O):
    return O - logsumexp(O, axis=1, keepdims=True)


def _weighted_ce(ctx, sample_weight):
    Z, W, b, t, single = ctx.batched()
    O = Z @ W + b
    rows = np.arange(len(t))
    log_h = _log_softmax(O)
    h = np.exp(log_h)
    weight = sample_weight(t)
    per_sample = -weight * log_h[rows, t]
    dO = h.copy()
    dO[rows, t] -= 1.0
    dO *= weight[:, None]
    return _finish_affine(dO, per_sample, Z, W, single)


def ce_loss(ctx):
    """Cross-entropy: -log softmax(W^T z + b)_t."""
    return _weighted_ce(ctx, lambda t: np.ones(len(t)))


def wce_loss(ctx, w):
    """Cross-entropy scaled by the per-class weight of the true class."""
    w = np.asarray(w, dtype=np.float64)
    return _weighted_ce(ctx, lambda t: w[t])


def crwwce_loss(ctx, cfn, Cfp):
    """Categorical real-world-weight cross-entropy.

    -[cfn_t log h_t + sum_{k != t} Cfp[k, t] log(1 - h_k)], with ``h`` clamped
    to [1e-12, 1 - 1e-12] inside both logarithms.
    """
    cfn = np.asarray(cfn, dtype=np.float64)
    Cfp = np.asarray(Cfp, dtype=np.float64)
    Z, W, b, t, single = ctx.batched()
    O = Z @ W + b
    rows = np.arange(len(t))
    log_h = _log_softmax(O)
    h = np.exp(log_h)

    log_ht = log_h[rows, t]
    floor = math.log(PROB_CLAMP)
    fn_active = log_ht > floor
    fn_term = cfn[t] * np.maximum(log_ht, floor)

    fp_w = Cfp[:, t].T  # (N, K): Cfp[k', t_n]
    fp_active = h < 1.0 - PROB_CLAMP
    one_minus = np.where(fp_active, 1.0 - h, PROB_CLAMP)
    fp_term = np.sum(fp_w * np.log(one_minus), axis=1)
    per_sample = -(fn_term + fp_term)

    # d(-cfn_t log h_t)/dO = cfn_t (h - y)
    dO = h.copy()
    dO[rows, t] -= 1.0
    dO *= (cfn[t] * fn_active)[:, None]
    dh_fp = np.where(fp_active, fp_w / one_minus, 0.0)
    dO += softmax_backward(h, dh_fp)
    return _finish_affine(dO, per_sample, Z, W, single)


def wasserstein_loss(
    ctx,
    C,
    lam=DEFAULT_LAMBDA,
    tol=SINKHORN_TOL,
    max_iter=SINKHORN_MAX_ITER,
    smoothing=MARGINAL_SMOOTHING,
    strict=True,
):
    """Entropic transport cost <T*, C> - lam H(T*) between softmax output and target.

    The target is the one-hot label smoothed toward uniform by ``smoothing``.
    The gradient w.r.t. the predicted distribution is the row dual potential
    of the converged Sinkhorn problem, chained through the softmax (which
    annihilates its constant offset). With ``strict`` a non-converged solve
    raises ConvergenceError; otherwise it warns and flags the output.
    """
    C = np.asarray(C, dtype=np.float64)
    Z, W, b, t, single = ctx.batched()
    K = W.shape[1]
    O = Z @ W + b
    h = np.maximum(softmax(O), 1e-300)
    y = smooth_marginal(np.eye(K)[t], smoothing)
    res = sinkhorn_batch(h, y, C, lam, tol=tol, max_iter=max_iter)
    converged = bool(np.all(res.converged))
    if not converged:
        msg = f"Sinkhorn did not converge in {res.iterations} iterations"
        if strict:
            raise ConvergenceError(msg, iterations=res.iterations)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    per_sample = np.sum(res.T * C, axis=(1, 2)) - lam * entropy(res.T)
    f = res.f - res.f.mean(axis=1, keepdims=True)
    dO = softmax_backward(h, f)
    return _finish_affine(
        dO,
        per_sample,
        Z,
        W,
        single,
        sinkhorn_iterations=res.iterations,
        converged=converged,
    )


def _angular(ctx, s, margins):
    """Scaled-cosine softmax cross-entropy with additive margin on the true class.

    ``margins`` is a length-K vector; sample n receives ``margins[t_n]``.
    Samples whose margin is exactly zero use the raw cosine, so zero-margin
    variants are bitwise identical to the margin-free loss.
    """
    Z, W, _, t, single = ctx.batched()
    n, K = Z.shape[0], W.shape[1]
    rows = np.arange(n)
    Zn, z_norm = normalize_rows(Z, axis=1)
    Wn, w_norm = normalize_rows(W, axis=0)
    cos = Zn @ Wn

    logits = s * cos
    dlogit_dcos_t = np.full(n, float(s))
    m_t = np.asarray(margins, dtype=np.float64)[t]
    with_margin = m_t > 0
    if np.any(with_margin):
        idx = rows[with_margin]
        c_raw = cos[idx, t[idx]]
        c = np.clip(c_raw, -1.0 + ARCCOS_CLAMP, 1.0 - ARCCOS_CLAMP)
        theta = np.arccos(c)
        shifted = theta + m_t[with_margin]
        logits[idx, t[idx]] = s * np.cos(shifted)
        inside = (c_raw > -1.0 + ARCCOS_CLAMP) & (c_raw < 1.0 - ARCCOS_CLAMP)
        dlogit_dcos_t[idx] = np.where(inside, s * np.sin(shifted) / np.sin(theta), 0.0)

    log_p = _log_softmax(logits)
    per_sample = -log_p[rows, t]
    d_logits = np.exp(log_p)
    d_logits[rows, t] -= 1.0

    d_cos = d_logits * s
    d_cos[rows, t] = d_logits[rows, t] * dlogit_dcos_t
    d_cos /= n
    grad_zn = d_cos @ Wn.T
    grad_wn = Zn.T @ d_cos
    grad_z = normalize_backward(Zn, z_norm, grad_zn, axis=1)
    grad_W = normalize_backward(Wn, w_norm, grad_wn, axis=0)
    return LossOutput(
        loss=float(np.mean(per_sample)),
        grad_z=grad_z[0] if single else grad_z,
        grad_W=grad_W,
        grad_b=np.zeros(K),
        per_sample=per_sample,
    )


def l2softmax_loss(ctx, s):
    """Softmax cross-entropy over s * cos(theta_k), no margin."""
    K = np.asarray(ctx.W).shape[1]
    return _angular(ctx, s, np.zeros(K))


def arcface_loss(ctx, s, m):
    """Additive angular margin m on the true-class angle for every class."""
    K = np.asarray(ctx.W).shape[1]
    return _angular(ctx, s, np.full(K, float(m)))


def camri_loss(ctx, s, m):
    """Additive angular margin taken per true class from the vector ``m``.

    With ``m = mu * onehot(kappa)`` the margin only applies to samples of the
    important class.
    """
    return _angular(ctx, s, np.asarray(m, dtype=np.float64))


def _grid_value(grid_point, key, position=0):
    if isinstance(grid_point, dict):
        if key not in grid_point:
            raise InvalidInputError(f"grid point is missing {key!r}")
        return float(grid_point[key])
    if isinstance(grid_point, (tuple, list)):
        return float(grid_point[position])
    return float(grid_point)


def _kappa_cross(K, kappa, value):
    """K x K matrix: ``value`` on the kappa row and column, 1 elsewhere, 0 diagonal."""
    mat = np.ones((K, K))
    mat[kappa, :] = value
    mat[:, kappa] = value
    np.fill_diagonal(mat, 0.0)
    return mat


def build_penalty_config(kind, K, kappa, grid_point=None, lam=DEFAULT_LAMBDA):
    """Build the penalty vectors/matrices for one grid point.

    ``grid_point`` is a dict with the keys used by each kind:
    wce ``w``; crwwce ``fn`` and ``fp``; wasserstein ``c`` (optional ``lam``);
    l2softmax ``s``; arcface ``m`` and ``s``; camri ``mu`` and ``s``.
    Tuples are accepted in that key order, and a bare number for one-key kinds.
    """
    if kind not in LOSS_KINDS:
        raise InvalidInputError(f"unknown loss kind {kind!r}")
    if not 0 <= kappa < K:
        raise InvalidInputError(f"kappa={kappa} outside 0..{K - 1}")
    params = {}
    if kind == "ce":
        return PenaltyConfig("ce", K, kappa, params=params)
    if kind == "wce":
        w_k = _grid_value(grid_point, "w")
        w = np.ones(K)
        w[kappa] = w_k
        params = {"kappa": kappa, "w": w_k}
        return PenaltyConfig("wce", K, kappa, w=w, params=params)
    if kind == "crwwce":
        fn = _grid_value(grid_point, "fn", 0)
        fp = _grid_value(grid_point, "fp", 1)
        cfn = np.ones(K)
        cfn[kappa] = fn
        params = {"kappa": kappa, "fn": fn, "fp": fp}
        return PenaltyConfig("crwwce", K, kappa, cfn=cfn, Cfp=_kappa_cross(K, kappa, fp), params=params)
    if kind == "wasserstein":
        c = _grid_value(grid_point, "c", 0)
        if isinstance(grid_point, dict) and "lam" in grid_point:
            lam = float(grid_point["lam"])
        params = {"kappa": kappa, "c": c, "lam": lam}
        return PenaltyConfig("wasserstein", K, kappa, C=_kappa_cross(K, kappa, c), lam=lam, params=params)
    if kind == "l2softmax":
        s = _grid_value(grid_point, "s")
        params = {"s": s}
        return PenaltyConfig("l2softmax", K, kappa, m=np.zeros(K), s=s, params=params)
    if kind == "arcface":
        m = _grid_value(grid_point, "m", 0)
        s = _grid_value(grid_point, "s", 1)
        params = {"m": m, "s": s}
        return PenaltyConfig("arcface", K, kappa, m=np.full(K, m), s=s, params=params)
    mu = _grid_value(grid_point, "mu", 0)
    s = _grid_value(grid_point, "s", 1)
    margins = np.zeros(K)
    margins[kappa] = mu
    params = {"kappa": kappa, "mu": mu, "s": s}
    return PenaltyConfig("camri", K, kappa, m=margins, s=s, params=params)


def loss_eval(cfg, ctx, strict=True):
    """Evaluate the loss selected by ``cfg`` on ``ctx``."""
    kind = cfg.kind
    if kind == "ce":
        return ce_loss(ctx)
    if kind == "wce":
        return wce_loss(ctx, cfg.w)
    if kind == "crwwce":
        return crwwce_loss(ctx, cfg.cfn, cfg.Cfp)
    if kind == "wasserstein":
        return wasserstein_loss(ctx, cfg.C, cfg.lam, strict=strict)
    if kind == "l2softmax":
        return l2softmax_loss(ctx, cfg.s)
    if kind == "arcface":
        return arcface_loss(ctx, cfg.s, float(cfg.m[0]))
    return camri_loss(ctx, cfg.s, cfg.m)
