"""Executable checks of the feature-norm properties of softmax and feature incay.

Each check returns a :class:`PropertyReport`. ``worst_margin`` is the
smallest slack seen across all tested inequalities: positive means every
inequality held with room to spare, zero or negative marks a violation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .losses import ClassifierState, correctness_mask, feature_incay, softmax_loss, softmax_probs
from .numerics import l2_norm, make_rng


class HypothesisUnmet(ValueError):
    """The inputs do not satisfy the premise of the property being checked."""


@dataclass
class PropertyReport:
    property_id: str
    instances: int = 0
    violations: int = 0
    worst_margin: float = math.inf
    offending: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def record(self, margin: float, ok: bool, instance=None) -> None:
        self.instances += 1
        self.worst_margin = min(self.worst_margin, margin)
        if not ok:
            self.violations += 1
            self.offending.append(instance)

    def merge(self, other: "PropertyReport") -> None:
        self.instances += other.instances
        self.violations += other.violations
        self.worst_margin = min(self.worst_margin, other.worst_margin)
        self.offending.extend(other.offending)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.property_id}: {self.instances} instances, "
                f"{self.violations} violations, worst margin {self.worst_margin:.6g}")


def orthant_weights(k: int, d: int) -> np.ndarray:
    """K unit vectors from {+e_1..+e_D, -e_1..-e_D}, pairwise angle >= 90 degrees."""
    if k > 2 * d:
        raise HypothesisUnmet(f"need K <= 2D, got K={k}, D={d}")
    if k < 1 or d < 1:
        raise ValueError(f"need K, D >= 1, got K={k}, D={d}")
    eye = np.eye(d)
    return np.concatenate([eye, -eye])[:k]


def check_lemma(max_k: int = 32) -> PropertyReport:
    """Every orthant construction with K <= min(2D, max_k) has unit rows and dots <= 0."""
    report = PropertyReport("lemma-orthant")
    for d in range(1, max_k // 2 + 1):
        for k in range(2, min(2 * d, max_k) + 1):
            w = orthant_weights(k, d)
            gram = w @ w.T
            off = gram[~np.eye(k, dtype=bool)]
            unit_err = float(np.max(np.abs(np.diag(gram) - 1.0)))
            margin = 0.0 - float(off.max())
            ok = unit_err == 0.0 and margin >= 0
            report.record(margin, ok, {"K": k, "D": d, "max_dot": -margin, "unit_err": unit_err})
    return report


def check_property1(cls: ClassifierState, f, y, scales=(0.1, 0.5, 1.0, 3.0)) -> PropertyReport:
    """Softmax loss strictly decreases as correctly classified features grow.

    For every row, losses at (1 + t) f over the sorted ``scales`` (with t=0
    prepended) must be strictly decreasing.
    """
    f = np.atleast_2d(np.asarray(f, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y))
    logits = f @ cls.weights.T
    ok_mask = correctness_mask(logits, y)
    if not ok_mask.all():
        raise HypothesisUnmet(f"rows {np.flatnonzero(~ok_mask).tolist()} are not correctly classified")
    ts = [0.0] + sorted(float(t) for t in scales)
    report = PropertyReport("property1-monotone-loss")
    for i in range(f.shape[0]):
        losses = [softmax_loss((1 + t) * f[i:i + 1], y[i:i + 1], cls).base_loss for t in ts]
        gaps = np.diff(losses)
        margin = -float(gaps.max())
        report.record(margin, bool(np.all(gaps < 0)), {"f": f[i].tolist(), "y": int(y[i]), "losses": losses})
    return report


def random_property1_instances(rng: np.random.Generator, n: int = 100):
    """Yield (cls, f, y) with a correctly classified single feature."""
    made = 0
    while made < n:
        k = int(rng.integers(2, 11))
        d = int(rng.integers(2, 17))
        w = rng.standard_normal((k, d))
        f = rng.standard_normal((1, d)) * rng.uniform(0.2, 3.0)
        logits = f @ w.T
        y = np.array([int(np.argmax(logits))])
        if not correctness_mask(logits, y)[0]:
            continue
        made += 1
        yield ClassifierState(w), f, y


def check_property2(cls: ClassifierState, y: int, norm_ladder=(1.0, 5.0, 10.0, 20.0), threshold: float = 1e-6) -> PropertyReport:
    """Softmax feature gradient vanishes as f = t w_y lengthens.

    Gradient norms must be strictly decreasing along ``norm_ladder`` and the
    last one below ``threshold``.
    """
    w_y = cls.weights[y]
    ladder = [float(t) for t in norm_ladder]
    norms = [l2_norm(softmax_loss(t * w_y[None, :], [y], cls).d_features) for t in ladder]
    report = PropertyReport("property2-vanishing-gradient")
    instance = {"y": int(y), "ladder": ladder, "grad_norms": norms}
    for a, b in zip(norms, norms[1:]):
        report.record(a - b, b < a, instance)
    report.record(threshold - norms[-1], norms[-1] < threshold, instance)
    return report


def saturation_probability(k: int, d: int, norm: float = 10.0) -> float:
    """P_y for f = norm * w_y under orthant weights."""
    w = orthant_weights(k, d)
    return float(softmax_probs((norm * w[:1]) @ w.T)[0, 0])


def property3_bounds(alpha: float, theta_deg: float):
    """(minimal inter-class distance, feature-norm upper bound) for angle theta.

    min_inter = 2 alpha sin(theta/2); the upper bound alpha (1 + 2 sin(theta/2))
    keeps the maximal intra-class spread below min_inter.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if not 0 < theta_deg <= 180:
        raise ValueError(f"theta must lie in (0, 180] degrees, got {theta_deg}")
    s = math.sin(math.radians(theta_deg) / 2)
    return 2 * alpha * s, alpha * (1 + 2 * s)


def check_property3(alphas=(0.5, 1.0, 2.0, 10.0), tol: float = 1e-12) -> PropertyReport:
    """Bound interval endpoints (1 + sqrt 2) alpha at 90 degrees and 3 alpha at 180."""
    report = PropertyReport("property3-bounds")
    for alpha in alphas:
        for theta, expected in ((90.0, (1 + math.sqrt(2)) * alpha), (180.0, 3 * alpha)):
            _, upper = property3_bounds(alpha, theta)
            err = abs(upper - expected)
            report.record(tol - err, err <= tol, {"alpha": alpha, "theta": theta, "upper": upper, "expected": expected})
    return report


def incay_grad_norm(norm: float, epsilon: float, direction=None) -> float:
    """Unclipped incay gradient norm for one active feature of the given norm."""
    d = np.array([1.0]) if direction is None else np.asarray(direction, dtype=np.float64)
    f = norm * d / l2_norm(d)
    _, grad = feature_incay(f[None, :], [True], epsilon, clip=None)
    return l2_norm(grad)


def check_incay_ordering(epsilon: float, norm_pairs, rng: np.random.Generator | None = None) -> PropertyReport:
    """Smaller-norm features receive larger incay gradients (norms >= 1)."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    rng = make_rng(0) if rng is None else rng
    report = PropertyReport("incay-gradient-ordering")
    for a, b in norm_pairs:
        p, q = sorted((float(a), float(b)))
        if p < 1:
            raise HypothesisUnmet(f"ordering is checked for norms >= 1, got {p}")
        d = int(rng.integers(1, 9))
        g_p = incay_grad_norm(p, epsilon, rng.standard_normal(d))
        g_q = incay_grad_norm(q, epsilon, rng.standard_normal(d))
        if p == q:
            report.record(0.0, True, None)
            continue
        report.record(g_p - g_q, g_p > g_q, {"norms": (p, q), "grad_norms": (g_p, g_q)})
    return report


def run_verification(seed: int = 0) -> list:
    """The default property suite."""
    rng = make_rng(seed)
    reports = [check_lemma(32)]

    p1 = PropertyReport("property1-monotone-loss")
    for cls, f, y in random_property1_instances(rng, 100):
        p1.merge(check_property1(cls, f, y))
    reports.append(p1)

    w = orthant_weights(10, 16)
    cls = ClassifierState(w)
    p2 = PropertyReport("property2-vanishing-gradient")
    for y in range(10):
        p2.merge(check_property2(cls, y))
    reports.append(p2)

    sat = PropertyReport("property2-saturation")
    p_y = saturation_probability(10, 16, 10.0)
    sat.record(p_y - 0.999, p_y > 0.999, {"K": 10, "norm": 10.0, "P_y": p_y})
    reports.append(sat)

    reports.append(check_property3())
    pairs = rng.uniform(1.0, 50.0, size=(1000, 2))
    reports.append(check_incay_ordering(1e-2, pairs, rng))
    return reports
