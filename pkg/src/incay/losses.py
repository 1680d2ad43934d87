"""Softmax-family losses, the correctness indicator and feature incay.

Every loss takes features ``f`` (N x D), integer labels ``y`` in ``[0, K)``
and a :class:`ClassifierState` whose rows are the class weight vectors, and
returns a :class:`LossReport` with the mean loss over the batch and exact
gradients with respect to both features and class weights.

The reciprocal-norm objective combines any of the base losses with weight
decay on the class weights and the feature-incay term

    incay(f) = 1/N * sum_i h(i) / (||f_i||^2 + eps)

where ``h(i)`` is 1 only for samples the current forward pass classifies
correctly. ``h`` is treated as a constant when differentiating.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Tensor, row_norms

LOSS_KINDS = ("softmax", "lsoftmax", "asoftmax", "center", "coco", "l2softmax")

DEFAULT_EPSILON = 1e-2
INCAY_CLIP = 1.0


@dataclass
class ClassifierState:
    """Class weight vectors (K x D rows) and optional center-loss centers."""

    weights: Tensor
    centers: Tensor | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError(f"weights must be K x D, got shape {self.weights.shape}")
        k, d = self.weights.shape
        if k < 2 or d < 1:
            raise ValueError(f"need K >= 2 and D >= 1, got K={k}, D={d}")
        if self.centers is not None:
            self.centers = np.asarray(self.centers, dtype=np.float64)
            if self.centers.shape != self.weights.shape:
                raise ValueError(f"centers shape {self.centers.shape} != weights shape {self.weights.shape}")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class LossConfig:
    kind: str = "softmax"
    margin: int = 2
    alpha: float = 10.0
    center_weight: float = 0.01
    center_lr: float = 0.5
    incay_lambda: float = 0.0
    epsilon: float = DEFAULT_EPSILON
    decay_mu: float = 0.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if int(self.margin) != self.margin or self.margin < 1:
            raise ValueError(f"margin must be a positive integer, got {self.margin}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        for name in ("center_weight", "incay_lambda", "decay_mu"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0 < self.center_lr <= 1:
            raise ValueError(f"center_lr must lie in (0, 1], got {self.center_lr}")


@dataclass
class LossReport:
    base_loss: float
    d_features: Tensor
    d_weights: Tensor
    probs: Tensor
    logits: Tensor
    mask: np.ndarray
    incay_loss: float = 0.0
    decay_loss: float = 0.0
    total: float = field(default=None)
    center_loss: float = 0.0

    def __post_init__(self):
        if self.total is None:
            self.total = self.base_loss


# --------------------------------------------------------------------------
# shared pieces


def _check_inputs(f: Tensor, y, cls: ClassifierState):
    f = np.asarray(f, dtype=np.float64)
    y = np.asarray(y)
    if f.ndim != 2 or f.shape[1] != cls.weights.shape[1]:
        raise ValueError(f"features shape {f.shape} incompatible with weights {cls.weights.shape}")
    if y.shape != (f.shape[0],):
        raise ValueError(f"labels shape {y.shape}, expected ({f.shape[0]},)")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integers")
        y = y.astype(np.int64)
    k = cls.num_classes
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{y.min()}, {y.max()}]")
    return f, y


def softmax_probs(logits: Tensor) -> Tensor:
    """Row-wise softmax with max shift."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def sample_nll(logits: Tensor, y) -> Tensor:
    """Per-sample -log softmax(z)[y], accurate even when the loss is ~1e-300.

    Computed as log(1 + sum_{j != y} exp(z_j - z_y)) with a shift only when a
    non-target logit exceeds the target one.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y)
    rows = np.arange(z.shape[0])
    d = z - z[rows, y][:, None]
    d[rows, y] = -np.inf
    top = np.maximum(d.max(axis=1), 0.0)
    s = np.exp(d - top[:, None]).sum(axis=1)
    return np.where(top > 0, top + np.log(np.exp(-top) + s), np.log1p(s))


def _softmax_head(logits: Tensor, y):
    """Mean NLL, probabilities and dLoss/dlogits for a batch."""
    n = logits.shape[0]
    probs = softmax_probs(logits)
    loss = float(sample_nll(logits, y).mean())
    g = probs.copy()
    g[np.arange(n), y] -= 1.0
    g /= n
    return loss, probs, g


def correctness_mask(logits: Tensor, y) -> np.ndarray:
    """h(i): True iff the label logit is strictly above every other logit."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y)
    rows = np.arange(z.shape[0])
    others = z.copy()
    others[rows, y] = -np.inf
    return z[rows, y] > others.max(axis=1)


def _nonzero_norms(x: Tensor, what: str) -> Tensor:
    norms = row_norms(x)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise ValueError(f"zero-norm {what} row(s) {bad.tolist()}: angle undefined")
    return norms


def _unit_rows_backward(u: Tensor, norms: Tensor, d_u: Tensor) -> Tensor:
    """Gradient through x -> x/||x|| row-wise: (I - u u^T) d_u / ||x||."""
    radial = np.einsum("ij,ij->i", u, d_u)
    return (d_u - radial[:, None] * u) / norms[:, None]


# --------------------------------------------------------------------------
# plain softmax


def softmax_loss(f: Tensor, y, cls: ClassifierState) -> LossReport:
    """Bias-free softmax cross-entropy averaged over the batch."""
    f, y = _check_inputs(f, y, cls)
    w = cls.weights
    logits = f @ w.T
    loss, probs, g = _softmax_head(logits, y)
    return LossReport(
        base_loss=loss,
        d_features=g @ w,
        d_weights=g.T @ f,
        probs=probs,
        logits=logits,
        mask=correctness_mask(logits, y),
    )


# --------------------------------------------------------------------------
# large-margin (L-Softmax / A-Softmax)


def _chebyshev(c: Tensor, m: int):
    """T_m(c) = cos(m acos c) and U_{m-1}(c) = sin(m acos c) / sin(acos c)."""
    t_prev, t = np.ones_like(c), c.copy()
    u_prev, u = np.zeros_like(c), np.ones_like(c)
    for _ in range(m - 1):
        t_prev, t = t, 2 * c * t - t_prev
        u_prev, u = u, 2 * c * u - u_prev
    return t, u


def _segment(theta: Tensor, m: int) -> Tensor:
    return np.minimum(np.floor(theta * m / np.pi), m - 1)


def psi(theta, m: int):
    """Margin angle function (-1)^k cos(m theta) - 2k, theta in [k pi/m, (k+1) pi/m]."""
    if int(m) != m or m < 1:
        raise ValueError(f"m must be a positive integer, got {m}")
    th = np.asarray(theta, dtype=np.float64)
    if np.any(th < 0) or np.any(th > np.pi) or np.any(np.isnan(th)):
        raise ValueError("theta must lie in [0, pi]")
    k = _segment(th, m)
    out = (-1.0) ** k * np.cos(m * th) - 2 * k
    return float(out) if out.ndim == 0 else out


def _psi_of_cos(c: Tensor, m: int):
    """psi and d psi / d cos as functions of the cosine."""
    c = np.clip(c, -1.0, 1.0)
    k = _segment(np.arccos(c), m)
    t, u = _chebyshev(c, m)
    sign = (-1.0) ** k
    return sign * t - 2 * k, sign * m * u


def lsoftmax_loss(f: Tensor, y, cls: ClassifierState, m: int, normalize_weights: bool = False) -> LossReport:
    """Large-margin softmax; with ``normalize_weights`` the A-Softmax form.

    The target logit is ||w_y|| ||f|| psi(theta_y) (||f|| psi(theta_y) when
    weights are normalized); other logits are the plain inner products of
    ``f`` with the (normalized) weights.
    """
    if int(m) != m or m < 1:
        raise ValueError(f"m must be a positive integer, got {m}")
    f, y = _check_inputs(f, y, cls)
    n = f.shape[0]
    rows = np.arange(n)
    f_norm = _nonzero_norms(f, "feature")
    if normalize_weights:
        w_norm = _nonzero_norms(cls.weights, "weight")
        w = cls.weights / w_norm[:, None]
    else:
        w = cls.weights
    a = row_norms(w)[y]
    if np.any(a == 0):
        raise ValueError("zero-norm target weight row: angle undefined")

    logits = f @ w.T
    w_y = w[y]
    cos = logits[rows, y] / (a * f_norm)
    psi_val, dpsi = _psi_of_cos(cos, m)
    logits[rows, y] = a * f_norm * psi_val

    loss, probs, g = _softmax_head(logits, y)
    g_t = g[rows, y].copy()
    g_other = g.copy()
    g_other[rows, y] = 0.0

    d_f = g_other @ w
    d_w = g_other.T @ f
    # target logit z = a r psi(c), c = w.f / (a r)
    d_f += g_t[:, None] * (
        (a * psi_val / f_norm)[:, None] * f + dpsi[:, None] * (w_y - (a * cos / f_norm)[:, None] * f)
    )
    dz_dw = (f_norm * psi_val / a)[:, None] * w_y + dpsi[:, None] * (f - (f_norm * cos / a)[:, None] * w_y)
    np.add.at(d_w, y, g_t[:, None] * dz_dw)

    if normalize_weights:
        d_w = _unit_rows_backward(w, w_norm, d_w)
    return LossReport(
        base_loss=loss,
        d_features=d_f,
        d_weights=d_w,
        probs=probs,
        logits=logits,
        mask=correctness_mask(logits, y),
    )


# --------------------------------------------------------------------------
# center loss


def center_loss(f: Tensor, y, cls: ClassifierState, center_weight: float = 1.0) -> LossReport:
    """Softmax jointly with center_weight * mean_i 1/2 ||f_i - c_{y_i}||^2.

    ``center_loss`` on the report holds the unweighted center term; centers
    receive no gradient here (see :func:`center_update`).
    """
    if cls.centers is None:
        raise ValueError("center loss needs ClassifierState.centers")
    report = softmax_loss(f, y, cls)
    f, y = _check_inputs(f, y, cls)
    diff = f - cls.centers[y]
    n = f.shape[0]
    term = 0.5 * float(np.einsum("ij,ij->", diff, diff)) / n
    report.center_loss = term
    report.base_loss += center_weight * term
    report.total = report.base_loss
    report.d_features = report.d_features + center_weight * diff / n
    return report


def center_update(cls: ClassifierState, f: Tensor, y, center_lr: float) -> Tensor:
    """c_j <- c_j - lr * sum_{y_i = j}(c_j - f_i) / (1 + n_j); returns new centers."""
    if cls.centers is None:
        raise ValueError("center update needs ClassifierState.centers")
    if not 0 < center_lr <= 1:
        raise ValueError(f"center_lr must lie in (0, 1], got {center_lr}")
    f, y = _check_inputs(f, y, cls)
    c = cls.centers
    resid = np.zeros_like(c)
    np.add.at(resid, y, c[y] - f)
    counts = np.bincount(y, minlength=c.shape[0]).astype(np.float64)
    return c - center_lr * resid / (1.0 + counts)[:, None]


# --------------------------------------------------------------------------
# cosine (COCO) and L2-constrained softmax


def coco_loss(f: Tensor, y, cls: ClassifierState) -> LossReport:
    """Softmax over cosine similarities between features and class weights."""
    f, y = _check_inputs(f, y, cls)
    f_norm = _nonzero_norms(f, "feature")
    w_norm = _nonzero_norms(cls.weights, "weight")
    fu = f / f_norm[:, None]
    wu = cls.weights / w_norm[:, None]
    logits = fu @ wu.T
    loss, probs, g = _softmax_head(logits, y)
    return LossReport(
        base_loss=loss,
        d_features=_unit_rows_backward(fu, f_norm, g @ wu),
        d_weights=_unit_rows_backward(wu, w_norm, g.T @ fu),
        probs=probs,
        logits=logits,
        mask=correctness_mask(logits, y),
    )


def l2_normalize(f: Tensor, alpha: float) -> Tensor:
    """Rescale every row of ``f`` to norm ``alpha``."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    f = np.asarray(f, dtype=np.float64)
    return alpha * f / _nonzero_norms(f, "feature")[:, None]


def l2softmax_loss(f: Tensor, y, cls: ClassifierState, alpha: float) -> LossReport:
    f, y = _check_inputs(f, y, cls)
    f_norm = _nonzero_norms(f, "feature")
    fu = f / f_norm[:, None]
    f_bar = alpha * fu
    logits = f_bar @ cls.weights.T
    loss, probs, g = _softmax_head(logits, y)
    d_fbar = g @ cls.weights
    return LossReport(
        base_loss=loss,
        d_features=alpha * _unit_rows_backward(fu, f_norm, d_fbar),
        d_weights=g.T @ f_bar,
        probs=probs,
        logits=logits,
        mask=correctness_mask(logits, y),
    )


# --------------------------------------------------------------------------
# feature incay and the combined objective


def feature_incay(f: Tensor, mask, epsilon: float = DEFAULT_EPSILON, clip: float | None = INCAY_CLIP):
    """Mean of h(i) / (||f_i||^2 + eps) and its gradient.

    Active gradient rows are -(2/N) f_i / (||f_i||^2 + eps)^2, rescaled to
    norm ``clip`` when larger (``clip=None`` returns the raw gradient).
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    f = np.asarray(f, dtype=np.float64)
    h = np.asarray(mask, dtype=bool)
    n = f.shape[0]
    if h.shape != (n,):
        raise ValueError(f"mask shape {h.shape}, expected ({n},)")
    denom = np.einsum("ij,ij->i", f, f) + epsilon
    value = float(np.sum(h / denom)) / n
    grad = (-2.0 / n) * f * (h / denom**2)[:, None]
    if clip is not None:
        norms = row_norms(grad)
        over = norms > clip
        grad[over] *= (clip / norms[over])[:, None]
    return value, grad


def base_loss(f: Tensor, y, cls: ClassifierState, config: LossConfig) -> LossReport:
    kind = config.kind
    if kind == "softmax":
        return softmax_loss(f, y, cls)
    if kind == "lsoftmax":
        return lsoftmax_loss(f, y, cls, config.margin)
    if kind == "asoftmax":
        return lsoftmax_loss(f, y, cls, config.margin, normalize_weights=True)
    if kind == "center":
        return center_loss(f, y, cls, config.center_weight)
    if kind == "coco":
        return coco_loss(f, y, cls)
    if kind == "l2softmax":
        return l2softmax_loss(f, y, cls, config.alpha)
    raise ValueError(f"unknown loss kind {kind!r}")


def reciprocal_norm_total(f: Tensor, y, cls: ClassifierState, config: LossConfig, mask=None) -> LossReport:
    """base + mu * sum_k ||w_k||^2 + lambda * feature_incay.

    ``mask`` defaults to the correctness of the base loss's own forward
    logits; pass one explicitly to hold it fixed.
    """
    report = base_loss(f, y, cls, config)
    if mask is None:
        mask = report.mask
    else:
        report.mask = np.asarray(mask, dtype=bool)
    w = cls.weights
    decay = float(np.sum(w * w))
    incay, d_incay = feature_incay(f, mask, config.epsilon)
    report.decay_loss = decay
    report.incay_loss = incay
    report.total = report.base_loss + config.decay_mu * decay + config.incay_lambda * incay
    if config.incay_lambda:
        report.d_features = report.d_features + config.incay_lambda * d_incay
    if config.decay_mu:
        report.d_weights = report.d_weights + 2.0 * config.decay_mu * w
    return report


def inference_logits(f: Tensor, cls: ClassifierState, kind: str, alpha: float = 1.0) -> Tensor:
    """Scores used for prediction under each loss.

    Margin terms apply only during training; A-Softmax and COCO score with
    normalized weights (COCO also with normalized features).
    """
    f = np.asarray(f, dtype=np.float64)
    w = cls.weights
    if kind in ("asoftmax", "coco"):
        w = w / _nonzero_norms(w, "weight")[:, None]
    if kind == "coco":
        norms = row_norms(f)
        f = f / np.where(norms > 0, norms, 1.0)[:, None]
    z = f @ w.T
    if kind == "l2softmax":
        norms = row_norms(f)
        z = alpha * z / np.where(norms > 0, norms, 1.0)[:, None]
    return z
