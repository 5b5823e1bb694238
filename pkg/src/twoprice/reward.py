"""Reward functions for admission-control pricing.

A reward function g maps an admission probability x in [0, 1] to the
expected reward collected per arrival, so the instantaneous reward rate
at arrival rate lambda is lambda*g(x).  Every g handled here is concave,
non-decreasing, and has g(0) = 0.  Three representations are supported:

* ``min_affine``  -- g(x) = min_k (a_k + b_k x), the natural form for
  discrete willingness-to-pay (WTP) distributions,
* ``quadratic``   -- g(x) = lin*x - quad*x^2 capped at its maximizer,
  the form produced by uniform WTP distributions,
* ``tabulated``   -- piecewise-linear interpolation of sampled values.

Constructors derive g from a WTP distribution for either revenue
(concave envelope of the quantile-revenue curve) or welfare (integral
of the top quantiles).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DiscreteWtp",
    "UniformWtp",
    "RewardFunction",
    "ShapeModel",
    "revenue_from_discrete_wtp",
    "revenue_from_uniform_wtp",
    "welfare_from_wtp",
    "min_affine",
    "classify_shape",
]

_EXACT_TOL = 1e-12


@dataclass(frozen=True)
class DiscreteWtp:
    """Discrete WTP distribution: value v_i with probability p_i."""

    values: tuple
    probs: tuple

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        probs = tuple(float(p) for p in self.probs)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "probs", probs)
        if not values:
            raise ValueError("empty WTP distribution")
        if len(values) != len(probs):
            raise ValueError("values and probs length mismatch")
        if any(v <= 0 for v in values):
            raise ValueError("WTP values must be positive")
        if len(set(values)) != len(values):
            raise ValueError("WTP values must be distinct")
        if any(p <= 0 for p in probs):
            raise ValueError("probabilities must be positive")
        if abs(sum(probs) - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {sum(probs)}, expected 1")


@dataclass(frozen=True)
class UniformWtp:
    """WTP uniformly distributed on [lo, hi]."""

    lo: float
    hi: float

    def __post_init__(self):
        if self.lo < 0:
            raise ValueError("lo must be nonnegative")
        if not self.lo < self.hi:
            raise ValueError("need lo < hi")


class RewardFunction:
    """Concave non-decreasing reward g on [0, 1].

    Instances are immutable after construction and are safe to share
    across threads.  Use the module-level constructors rather than
    calling ``__init__`` directly.
    """

    def __init__(self, kind, *, pieces=None, lin=None, quad=None, cap=None,
                 xs=None, ys=None, _origin_free=False):
        self.kind = kind
        if kind == "min_affine":
            self.pieces = _minimal_pieces(pieces)
            # per-segment lookup arrays (pieces sorted by decreasing slope)
            a = np.array([p[0] for p in self.pieces])
            b = np.array([p[1] for p in self.pieces])
            self._a, self._b = a, b
            self._bp = _breakpoints(self.pieces)
            if not _origin_free and abs(self(0.0)) > _EXACT_TOL:
                raise ValueError("min-affine reward must have g(0) = 0")
        elif kind == "quadratic":
            if quad < 0:
                raise ValueError("quadratic coefficient must be >= 0")
            self.lin, self.quad = float(lin), float(quad)
            unconstrained = lin / (2 * quad) if quad > 0 else math.inf
            self.cap = float(min(cap if cap is not None else math.inf,
                                 unconstrained, 1.0))
            if self.lin < 0:
                raise ValueError("quadratic reward must be non-decreasing at 0")
        elif kind == "tabulated":
            xs = np.asarray(xs, dtype=float)
            ys = np.asarray(ys, dtype=float)
            if xs.ndim != 1 or xs.shape != ys.shape or len(xs) < 2:
                raise ValueError("tabulated reward needs matching 1-d arrays")
            if xs[0] != 0.0 or abs(ys[0]) > _EXACT_TOL:
                raise ValueError("tabulated reward must start at (0, 0)")
            if np.any(np.diff(xs) <= 0):
                raise ValueError("tabulated x grid must be increasing")
            slopes = np.diff(ys) / np.diff(xs)
            if np.any(slopes < -1e-10):
                raise ValueError("tabulated reward must be non-decreasing")
            if np.any(np.diff(slopes) > 1e-10):
                raise ValueError("tabulated reward must be concave")
            self.xs, self.ys = xs, ys
        else:
            raise ValueError(f"unknown reward kind {kind!r}")

    # -- evaluation ---------------------------------------------------------

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 0
        x = np.atleast_1d(x)
        if self.kind == "min_affine":
            k = np.searchsorted(self._bp, x, side="right")
            out = self._a[k] + self._b[k] * x
        elif self.kind == "quadratic":
            xc = np.minimum(x, self.cap)
            out = self.lin * xc - self.quad * xc * xc
        else:
            out = np.interp(x, self.xs, self.ys)
        return float(out[0]) if scalar else out

    def supergradient_interval(self, x):
        """Return (g'_+(x), g'_-(x)), the supergradient set endpoints."""
        x = float(x)
        if self.kind == "min_affine":
            lo = hi = None
            k = int(np.searchsorted(self._bp, x, side="right"))
            hi_k = int(np.searchsorted(self._bp, x, side="left"))
            lo = float(self._b[k])        # right derivative
            hi = float(self._b[hi_k])     # left derivative (>= lo)
            if x <= 0:
                hi = float(self._b[0])
            return lo, hi
        if self.kind == "quadratic":
            if x < self.cap - _EXACT_TOL:
                d = self.lin - 2 * self.quad * x
                return d, d
            if x > self.cap + _EXACT_TOL:
                return 0.0, 0.0
            return 0.0 if self.cap < 1 else self.lin - 2 * self.quad * self.cap, \
                self.lin - 2 * self.quad * self.cap
        slopes = np.diff(self.ys) / np.diff(self.xs)
        i = int(np.clip(np.searchsorted(self.xs, x, side="right") - 1, 0, len(slopes) - 1))
        j = int(np.clip(np.searchsorted(self.xs, x, side="left") - 1, 0, len(slopes) - 1))
        return float(min(slopes[i], slopes[j])), float(max(slopes[i], slopes[j]))

    # -- structure ----------------------------------------------------------

    @property
    def is_min_affine(self):
        return self.kind in ("min_affine", "tabulated")

    def min_affine_pieces(self):
        """Exact (a, b) pieces; raises for smooth (quadratic) rewards."""
        if self.kind == "min_affine":
            return list(self.pieces)
        if self.kind == "tabulated":
            slopes = np.diff(self.ys) / np.diff(self.xs)
            pieces = [(float(y - s * x), float(s))
                      for x, y, s in zip(self.xs[:-1], self.ys[:-1], slopes)]
            return _minimal_pieces(pieces)
        raise ValueError("smooth reward has no exact min-affine form")

    def breakpoints(self):
        """Interior kink locations in (0, 1)."""
        if self.kind == "min_affine":
            return [float(t) for t in self._bp]
        if self.kind == "tabulated":
            return [float(t) for t in self.xs[1:-1]]
        return [self.cap] if 0 < self.cap < 1 else []

    def __repr__(self):
        if self.kind == "min_affine":
            return f"RewardFunction(min_affine, {len(self.pieces)} pieces)"
        if self.kind == "quadratic":
            return f"RewardFunction({self.lin:g}*x - {self.quad:g}*x^2, cap={self.cap:g})"
        return f"RewardFunction(tabulated, {len(self.xs)} points)"


def _minimal_pieces(pieces):
    """Sort by decreasing slope and drop pieces never active on [0, 1]."""
    cleaned = []
    for a, b in pieces:
        a, b = float(a), float(b)
        if not (math.isfinite(a) and math.isfinite(b)):
            raise ValueError("non-finite piece")
        if b < 0:
            raise ValueError("pieces must have nonnegative slope")
        cleaned.append((a, b))
    cleaned.sort(key=lambda p: (-p[1], p[0]))
    # among equal slopes only the lowest intercept matters
    dedup = []
    for a, b in cleaned:
        if dedup and abs(dedup[-1][1] - b) <= 1e-15:
            continue
        dedup.append((a, b))
    # keep pieces that attain the minimum somewhere on [0, 1]
    kept = []
    for a, b in dedup:
        while kept:
            # intersection of candidate with last kept piece
            a2, b2 = kept[-1]
            t = (a - a2) / (b2 - b)
            if len(kept) >= 2:
                a1, b1 = kept[-2]
                t_prev = (a2 - a1) / (b1 - b2)
                if t <= t_prev + 1e-15:   # last kept piece never active
                    kept.pop()
                    continue
            if t >= 1.0:                  # candidate never active on [0, 1]
                a = None
                break
            if t <= 0.0:                  # last kept piece never active
                kept.pop()
                continue
            break
        if a is not None:
            kept.append((a, b))
    if not kept:
        raise ValueError("no active pieces on [0, 1]")
    return tuple(kept)


def _breakpoints(pieces):
    bp = []
    for (a1, b1), (a2, b2) in zip(pieces, pieces[1:]):
        bp.append((a2 - a1) / (b1 - b2))
    return np.array(bp)


# -- constructors ------------------------------------------------------------


def min_affine(pieces, *, origin_free=False):
    """Reward from explicit (intercept, slope) pieces: g = min_k(a_k + b_k x)."""
    return RewardFunction("min_affine", pieces=pieces, _origin_free=origin_free)


def revenue_from_discrete_wtp(dist: DiscreteWtp) -> RewardFunction:
    """Revenue curve of a discrete WTP distribution.

    The revenue at admission probability x is the increasing concave
    envelope of x * F^{-1}(1 - x), computed exactly from the cumulative
    (quantile, revenue) breakpoints: upper convex hull by a Graham scan,
    then flattened past the argmax.
    """
    if not isinstance(dist, DiscreteWtp):
        raise TypeError("revenue_from_discrete_wtp needs a DiscreteWtp")
    order = np.argsort(dist.values)[::-1]
    v = np.asarray(dist.values, dtype=float)[order]
    p = np.asarray(dist.probs, dtype=float)[order]
    q = np.concatenate([[0.0], np.cumsum(p)])
    q[-1] = 1.0
    # posting price v_k sells to the top q_k quantiles: revenue v_k * q_k
    rev = np.concatenate([[0.0], v * q[1:]])
    hull = [0]
    for i in range(1, len(q)):
        while len(hull) >= 2:
            i1, i2 = hull[-2], hull[-1]
            cross = (rev[i2] - rev[i1]) * (q[i] - q[i2]) - (rev[i] - rev[i2]) * (q[i2] - q[i1])
            if cross <= 0:
                hull.pop()
            else:
                break
        hull.append(i)
    pieces = []
    peak = 0.0
    for i1, i2 in zip(hull, hull[1:]):
        b = (rev[i2] - rev[i1]) / (q[i2] - q[i1])
        if b <= 0:
            break
        pieces.append((float(rev[i1] - b * q[i1]), float(b)))
        peak = max(peak, rev[i2])
    pieces.append((float(peak), 0.0))
    return min_affine(pieces)


def revenue_from_uniform_wtp(dist: UniformWtp) -> RewardFunction:
    """Revenue curve of a Uniform[lo, hi] WTP distribution.

    Posting price hi - (hi - lo) x sells with probability x, so revenue
    is x * (hi - (hi - lo) x) up to its argmax and flat afterwards.
    """
    if not isinstance(dist, UniformWtp):
        raise TypeError("revenue_from_uniform_wtp needs a UniformWtp")
    return RewardFunction("quadratic", lin=dist.hi, quad=dist.hi - dist.lo)


def welfare_from_wtp(dist) -> RewardFunction:
    """Welfare g(x) = integral of F^{-1} over the top x quantiles."""
    if isinstance(dist, DiscreteWtp):
        order = np.argsort(dist.values)[::-1]
        v = np.asarray(dist.values, dtype=float)[order]
        p = np.asarray(dist.probs, dtype=float)[order]
        q = np.cumsum(p)
        pieces = []
        acc_q, acc_w = 0.0, 0.0
        for vi, qi in zip(v, q):
            # line with slope vi passing through (acc_q, acc_w)
            pieces.append((float(acc_w - vi * acc_q), float(vi)))
            acc_w += vi * (qi - acc_q)
            acc_q = qi
        return min_affine(pieces)
    if isinstance(dist, UniformWtp):
        # integral_{1-x}^{1} (lo + (hi-lo) v) dv = (lo + hi) x ... expanded below
        lo, hi = dist.lo, dist.hi
        return RewardFunction("quadratic", lin=hi, quad=(hi - lo) / 2.0)
    raise TypeError("welfare_from_wtp needs a DiscreteWtp or UniformWtp")


# -- local shape at the fluid optimum ----------------------------------------


@dataclass(frozen=True)
class ShapeModel:
    """Local curvature of g at x*: residual bounds k2|t|^a <= resid <= k1|t|^a."""

    alpha: float
    k1: float
    k2: float
    eps: float
    gprime_at_xstar: float
    supergradient_set_at_xstar: tuple
    xstar: float = None

    def __post_init__(self):
        lo, hi = self.supergradient_set_at_xstar
        if lo > hi + 1e-12:
            raise ValueError("empty supergradient set")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


def classify_shape(g: RewardFunction, xstar: float, eps: float) -> ShapeModel:
    """Fit the local shape exponent alpha of g at x*.

    Piecewise-linear rewards are classified exactly: alpha = 1 when x*
    sits on a kink (with k1 = k2 = half the slope gap), alpha = inf when
    x* is interior to a segment.  Smooth rewards are fitted by a log-log
    regression of the supergradient-line residual against |x - x*| on 64
    log-spaced offsets per side, snapping to {1, 2, inf} within 0.05.
    """
    if not 0.0 < xstar < 1.0:
        raise ValueError("xstar must lie in (0, 1)")
    if not 0.0 < eps < min(xstar, 1.0 - xstar):
        raise ValueError("need 0 < eps < min(xstar, 1 - xstar)")

    s_lo, s_hi = g.supergradient_interval(xstar)
    kinks = g.breakpoints()
    gap = min([abs(b - xstar) for b in kinks if abs(b - xstar) > 1e-11]
              or [min(xstar, 1 - xstar)])
    eps_eff = min(eps, 0.999 * gap)

    if g.is_min_affine or (g.kind == "quadratic" and abs(xstar - g.cap) <= 1e-11):
        if s_hi - s_lo > 1e-11:          # kink at x*
            k = (s_hi - s_lo) / 2.0
            return ShapeModel(1.0, k, k, eps_eff, (s_hi + s_lo) / 2.0, (s_lo, s_hi), xstar)
        if g.is_min_affine:              # locally linear
            return ShapeModel(math.inf, 0.0, 0.0, eps_eff, s_lo, (s_lo, s_hi), xstar)
    if g.kind == "quadratic" and xstar < g.cap:
        d = g.lin - 2 * g.quad * xstar
        if g.quad == 0.0:
            return ShapeModel(math.inf, 0.0, 0.0, eps_eff, d, (d, d), xstar)
        return ShapeModel(2.0, g.quad, g.quad, eps_eff, d, (d, d), xstar)
    if g.kind == "quadratic" and xstar > g.cap:
        return ShapeModel(math.inf, 0.0, 0.0, eps_eff, 0.0, (0.0, 0.0), xstar)

    # generic grid fit
    gp = (s_lo + s_hi) / 2.0
    offs = np.geomspace(1e-6 * eps_eff, eps_eff, 64)
    ts = np.concatenate([-offs[::-1], offs])
    resid = g(xstar) + gp * ts - g(xstar + ts)
    scale = max(abs(g(xstar)), 1.0)
    mask = resid > 1e-13 * scale
    if mask.sum() < 8:
        return ShapeModel(math.inf, 0.0, 0.0, eps_eff, gp, (s_lo, s_hi), xstar)
    lt = np.log(np.abs(ts[mask]))
    lr = np.log(resid[mask])
    alpha = float(np.polyfit(lt, lr, 1)[0])
    for snap in (1.0, 2.0):
        if abs(alpha - snap) < 0.05:
            alpha = snap
            break
    ratios = resid[mask] / np.abs(ts[mask]) ** alpha
    return ShapeModel(alpha, float(ratios.max()), float(ratios.min()),
                      eps_eff, gp, (s_lo, s_hi), xstar)
