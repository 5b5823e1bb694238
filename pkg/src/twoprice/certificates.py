"""Dual certificates: machine-verified upper bounds on stock-dependent reward.

Each builder constructs an explicit feasible solution to a dual program
obtained from the relaxed policy LP after majorizing g by a small
piecewise-linear function.  By weak duality the dual objective zeta
upper-bounds every stock-dependent policy's reward rate, which turns
asymptotic lower bounds on performance loss into concrete, checkable
numbers.  Three program families are covered:

* ``two_slope``    -- majorant min{Rx, rx} + offsets touching at x*,
  the kinked (and, via the kink majorant, the smooth) regime;
* ``three_piece``  -- majorant min{r1 x, r2 x + b2, b3}, the locally
  linear regime with its scarce / middle / flat subcases;
* ``static_price`` -- the policy LP restricted to one admission
  probability q, certifying that no static policy escapes a
  sqrt(c)-sized loss.

``verify_dual`` re-derives every constraint numerically and never
trusts the construction.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .equilibrium import ProblemInstance, erlang_stockout, fluid_value
from .lp import LpStatus, solve as lp_solve
from .policies import _chain_sdopt, build_lpsd
from .reward import RewardFunction, ShapeModel, min_affine

__all__ = [
    "DualCertificate",
    "VerificationReport",
    "build_dual_alpha1",
    "trivial_dual_alpha1",
    "fit_two_slopes",
    "build_kink_majorant",
    "smooth_loss_lower_bound",
    "build_dual_alpha_inf",
    "fit_three_pieces",
    "build_dual_static",
    "fit_linear_majorant",
    "verify_dual",
]

_LP_REFERENCE_LIMIT = 150   # dense-simplex primal reference up to this c


@dataclass
class DualCertificate:
    """Feasible dual point certifying reward <= zeta."""

    program: str
    zeta: float
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    params: dict

    def to_json(self) -> str:
        def arr(a):
            return None if a is None else [float(v) for v in a]
        return json.dumps({
            "program": self.program, "zeta": self.zeta,
            "alpha": arr(self.alpha), "beta": arr(self.beta),
            "gamma": arr(self.gamma), "params": self.params,
        })

    @classmethod
    def from_json(cls, text: str) -> "DualCertificate":
        d = json.loads(text)
        def arr(a):
            return None if a is None else np.asarray(a, dtype=float)
        return cls(program=d["program"], zeta=float(d["zeta"]),
                   alpha=arr(d["alpha"]), beta=arr(d["beta"]),
                   gamma=arr(d["gamma"]), params=d["params"])


@dataclass
class VerificationReport:
    passed: bool
    max_equality_violation: float
    max_constraint_violation: float
    min_multiplier: float
    weak_duality_margin: float
    reference: str
    failures: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# majorant fitting helpers


def _check_majorant(g, fn, label, tol=1e-9):
    xs = np.linspace(0.0, 1.0, 2001)
    gap = np.asarray(fn(xs)) - np.asarray(g(xs))
    if gap.min() < -tol * (1.0 + float(np.abs(g(xs)).max())):
        k = int(np.argmin(gap))
        raise ValueError(f"{label} fails to majorize g at x={xs[k]:.4f} "
                         f"(gap {gap[k]:.3e})")


def fit_two_slopes(inst: ProblemInstance):
    """Pick (R, r) supergradients at x* maximizing the certified gap.

    Any pair of supergradients R > r > 0 yields a valid two-line
    majorant through (x*, g(x*)); the certified gap is proportional to
    min{1, r/2} sqrt(R - r), maximized in closed form over the valid
    slope interval.
    """
    s_lo, s_hi = inst.g.supergradient_interval(inst.x_star)
    R = s_hi
    if R <= 1e-12:
        raise ValueError("g is flat at x*: two-slope certificate degenerate "
                         "(excess-supply regime)")
    gapfun = lambda r: min(1.0, r / 2.0) * math.sqrt(max(R - r, 0.0))
    cands = [max(s_lo, 1e-9), 2.0 * R / 3.0, 2.0]
    cands = [r for r in cands if max(s_lo, 1e-12) <= r < R]
    if not cands:
        cands = [max(s_lo, R / 2.0)]
    r = max(cands, key=gapfun)
    if not 0.0 < r < R:
        raise ValueError("no valid r in (0, R) at x*")
    return float(R), float(r)


def fit_linear_majorant(inst: ProblemInstance):
    """(r, b) with g <= r x + b, equality at x*, maximizing min{b, r x*/2}."""
    s_lo, s_hi = inst.g.supergradient_interval(inst.x_star)
    gstar = float(inst.g(inst.x_star))
    xstar = inst.x_star
    best = None
    for r in {max(s_lo, 1e-9), min(s_hi, 2.0 * gstar / (3.0 * xstar)),
              (s_lo + s_hi) / 2.0}:
        if r <= 0.0 or r > s_hi + 1e-15:
            continue
        r = min(r, s_hi)
        b = gstar - r * xstar
        if b <= 0.0:
            continue
        score = min(b, r * xstar / 2.0)
        if best is None or score > best[0]:
            best = (score, r, b)
    if best is None:
        raise ValueError("no valid linear majorant with r, b > 0 at x*")
    return float(best[1]), float(best[2])


def fit_three_pieces(inst: ProblemInstance):
    """(r1, r2, b2, b3, case) for the locally linear certificate.

    Uses the pieces of g itself where possible (a subset-min of g's
    pieces always majorizes g); inserts a middle or flat piece when g
    has fewer than three.  The case tag states which piece attains
    g(x*): "scarce" (first), "middle", or "flat".
    """
    pieces = inst.g.min_affine_pieces()
    xstar = inst.x_star
    gstar = float(inst.g(xstar))
    vals = [a + b * xstar for a, b in pieces]
    k = int(np.argmin(vals))
    a_k, b_k = pieces[k]
    r1 = pieces[0][1]
    if pieces[0][0] > 1e-12:
        raise ValueError("first piece must pass through the origin")
    gmax = float(inst.g(1.0))

    if k == 0:
        # x* on the steepest piece: insert a middle line below r1
        if len(pieces) >= 2 and pieces[1][0] > 0 and pieces[1][1] > 0:
            b2, r2 = pieces[1][0], pieces[1][1]
        else:
            r2 = r1 / 2.0
            b2 = gmax * (1.0 - r2 / r1)
        b3 = max(gmax, b2 * 1.5)
        case = "scarce"
    elif b_k > 1e-12:
        # x* interior on a sloped middle piece
        r2, b2 = b_k, a_k
        flat = [a for a, b in pieces if b <= 1e-12]
        b3 = flat[0] if flat else gmax
        if b3 <= b2:
            b3 = b2 + r2 * (1.0 - xstar) / 2.0 + 1e-9
        case = "middle"
    else:
        # x* on the flat cap: insert a middle line meeting beta-bound
        b3 = a_k
        r2_min = b3 / (2.0 * xstar)          # keeps beta_1 <= lambda
        sloped = [(a, b) for a, b in pieces if b > 1e-12]
        a_adj, b_adj = sloped[-1]
        r2 = max(b_adj, min(1.05 * r2_min, 0.99 * r1))
        if r2 >= r1:
            raise ValueError("cannot fit middle slope below r1")
        kink = b3 / r1 if b_adj <= r2_min else (b3 - a_adj) / b_adj
        b2 = max(a_adj, b3 - r2 * kink, 1e-9)
        case = "flat"
    maj = min_affine([(0.0, r1), (b2, r2), (b3, 0.0)], origin_free=True)
    _check_majorant(inst.g, maj, "three-piece fit")
    if abs(float(maj(xstar)) - gstar) > 1e-9 * (1 + gstar):
        raise ValueError("three-piece majorant does not touch g at x*")
    return float(r1), float(r2), float(b2), float(b3), case


# ---------------------------------------------------------------------------
# builders


def build_dual_alpha1(inst: ProblemInstance, R: float, r: float) -> DualCertificate:
    """Kinked-regime certificate from the two-slope majorant.

    zeta = lam g(x*) - lam min{1, r/2} x* sqrt((R - r)/c) with the
    linearly decaying multiplier ladder
    alpha_j = lam max{1 - j / sqrt(c (R - r)), 0}.
    """
    if not R > r > 0.0:
        raise ValueError("need R > r > 0")
    c, lam, xstar = inst.c, inst.lam, inst.x_star
    eps = R - r
    if c < 1.0 / eps:
        raise ValueError(f"need c >= 1/(R - r) = {1.0 / eps:.3g}")
    gstar = float(inst.g(xstar))
    maj = lambda x: np.minimum(R * np.asarray(x) + gstar - R * xstar,
                               r * np.asarray(x) + gstar - r * xstar)
    _check_majorant(inst.g, maj, "two-slope majorant")
    j = np.arange(1, c + 1)
    alpha = lam * np.maximum(1.0 - j / math.sqrt(c * eps), 0.0)
    beta = lam - alpha
    zeta = lam * gstar - lam * min(1.0, r / 2.0) * xstar * math.sqrt(eps / c)
    return DualCertificate(
        program="two_slope", zeta=float(zeta), alpha=alpha, beta=beta,
        gamma=None, params={"R": R, "r": r, "gstar": gstar},
    )


def trivial_dual_alpha1(inst: ProblemInstance, R: float, r: float) -> DualCertificate:
    """The vacuous-but-feasible point: all mass on the shallow slope,
    certifying only reward <= FLU."""
    if not R > r >= 0.0:
        raise ValueError("need R > r >= 0")
    gstar = float(inst.g(inst.x_star))
    c, lam = inst.c, inst.lam
    return DualCertificate(
        program="two_slope", zeta=lam * gstar,
        alpha=np.zeros(c), beta=np.full(c, lam), gamma=None,
        params={"R": R, "r": r, "gstar": gstar},
    )


def build_kink_majorant(g: RewardFunction, shape: ShapeModel,
                        eta: float) -> RewardFunction:
    """Two-line majorant of a smooth g with an artificial kink above x*.

    With h the local model g(x*) + g'(x*)(x - x*) - k2 |x - x*|^alpha,
    the left line is tangent to h at x* - eta and the right line keeps
    slope g'(x*); they meet at height g(x*) + (alpha - 1) k2 eta^alpha.
    The slopes are R = g'(x*) + alpha k2 eta^(alpha-1) and r = g'(x*).
    """
    if not (1.0 < shape.alpha < math.inf):
        raise ValueError("kink majorant needs alpha in (1, inf)")
    if shape.k2 <= 0.0:
        raise ValueError("kink majorant needs k2 > 0")
    if not 0.0 < eta < shape.eps:
        raise ValueError("need 0 < eta < eps")
    if shape.gprime_at_xstar <= 0.0:
        raise ValueError("kink majorant needs g'(x*) > 0")
    if shape.xstar is None:
        raise ValueError("shape must carry its evaluation point x*")
    maj, _, _, _ = _kink_majorant_at(g, shape, shape.xstar, eta)
    return maj


def _kink_majorant_at(g, shape, xstar, eta):
    gp = shape.gprime_at_xstar
    alpha, k2 = shape.alpha, shape.k2
    gstar = float(g(xstar))
    h_at = gstar - gp * eta - k2 * eta ** alpha
    R = gp + alpha * k2 * eta ** (alpha - 1.0)
    r = gp
    peak = gstar + (alpha - 1.0) * k2 * eta ** alpha
    left = (h_at + R * (eta - xstar), R)     # line through (x*-eta, h(x*-eta))
    right = (peak - r * xstar, r)            # line through (x*, peak)
    maj = min_affine([left, right], origin_free=True)
    _check_majorant(g, maj, "kink majorant")
    return maj, R, r, peak


def smooth_loss_lower_bound(inst: ProblemInstance, shape: ShapeModel,
                            eta: float = None) -> dict:
    """Certified loss lower bound for smooth g via the kink majorant.

    Composes the two-slope certificate on the majorized instance; the
    loss of any stock-dependent policy under g is then at least
    lam g(x*) - zeta.  When eta is not given it is tuned to maximize
    the closed-form bound, which peaks at eta = Theta(c^(-1/(alpha+1))).
    """
    if not (1.0 < shape.alpha < math.inf) or shape.k2 <= 0.0:
        raise ValueError("need finite alpha > 1 and k2 > 0")
    gp = shape.gprime_at_xstar
    if gp <= 0.0:
        raise ValueError("needs g'(x*) > 0")
    lam, c, xstar = inst.lam, inst.c, inst.x_star
    a, k2 = shape.alpha, shape.k2

    def closed_form(e):
        return lam * (min(1.0, gp / 2.0) * xstar
                      * math.sqrt(a * k2 * e ** (a - 1.0) / c)
                      - (a - 1.0) * k2 * e ** a)

    if eta is None:
        res = minimize_scalar(lambda e: -closed_form(e),
                              bounds=(1e-9, shape.eps * (1 - 1e-9)),
                              method="bounded", options={"xatol": 1e-12})
        eta = float(res.x)
    maj, R, r, peak = _kink_majorant_at(inst.g, shape, xstar, eta)
    inst_maj = ProblemInstance(inst.c, inst.lam, inst.d, maj)
    cert = build_dual_alpha1(inst_maj, R, r)
    loss_lb = lam * float(inst.g(xstar)) - cert.zeta
    return {"certificate": cert, "majorant": maj, "eta": eta,
            "loss_lower_bound": loss_lb, "closed_form": closed_form(eta),
            "majorized_instance": inst_maj}


def build_dual_alpha_inf(inst: ProblemInstance, r1: float, r2: float,
                         b2: float, b3: float, case: str) -> DualCertificate:
    """Locally-linear-regime certificate from min{r1 x, r2 x + b2, b3}.

    Subcases by the piece active at x*: "scarce" gives a constant gap
    r1/(2d), "middle" a gap min{K, r2/d} log c with K inherited from the
    instance scaling, "flat" a geometrically vanishing gap.  The middle
    multipliers are back-solved from the tail so every alpha_j stays
    nonnegative (the closed recursion alone dips negative).
    """
    if not (r1 > r2 > 0.0 and b3 > b2 > 0.0):
        raise ValueError("need r1 > r2 > 0 and b3 > b2 > 0")
    c, lam, d, xstar = inst.c, inst.lam, inst.d, inst.x_star
    maj = lambda x: np.minimum.reduce([r1 * np.asarray(x, dtype=float),
                                       r2 * np.asarray(x, dtype=float) + b2,
                                       np.full_like(np.asarray(x, dtype=float), b3)])
    _check_majorant(inst.g, maj, "three-piece majorant")
    t12 = b2 / (r1 - r2)
    t23 = (b3 - b2) / r2
    if abs(xstar - t12) < 1e-9 or abs(xstar - t23) < 1e-9:
        raise ValueError("x* sits on a majorant kink: certificate undefined")
    active = "scarce" if xstar < t12 else ("middle" if xstar < t23 else "flat")
    if case != active:
        raise ValueError(f"case {case!r} inconsistent with x* (expected {active!r})")
    gstar_maj = float(maj(xstar))
    if abs(gstar_maj - float(inst.g(xstar))) > 1e-9 * (1 + gstar_maj):
        raise ValueError("majorant must touch g at x*")

    if case == "scarce":
        beta_val = r1 / (2.0 * d * b2)
        if beta_val > lam:
            raise ValueError("instance too small: r1/(2 d b2) exceeds lambda")
        alpha = np.full(c, lam - beta_val)
        beta = np.full(c, beta_val)
        gamma = np.zeros(c)
        zeta = lam * r1 * xstar - r1 / (2.0 * d)
    elif case == "middle":
        span = xstar * (r1 - r2)
        eta = b2 / span
        K = (lam / c) * eta * (span - b2)
        logc = math.log(c)
        scale = 1.0
        for _ in range(60):
            M = scale * min(K, r2 / d) * logc
            L = int(math.ceil(M * d / r2)) + 1
            a = np.zeros(c + 2)
            for j in range(min(L, c), 0, -1):
                need = max(0.0, M - r2 * j / d)
                a[j] = (need + a[j + 1] * span) / b2
            cap = min(lam, (lam * b2 - M) / span)
            if a[1] <= cap:
                break
            scale *= 0.5
        else:
            raise ValueError("could not scale middle-case certificate feasible")
        alpha = a[1:c + 1]
        beta = lam - alpha
        gamma = np.zeros(c)
        zeta = lam * (r2 * xstar + b2) - M
    else:  # flat
        if not b3 - b2 < r2 * xstar:
            raise ValueError("flat case needs (b3 - b2)/r2 < x*")
        beta1 = lam * b3 / (2.0 * r2 * xstar)
        if beta1 > lam:
            raise ValueError("flat case needs b3 <= 2 r2 x* (beta_1 <= lambda)")
        rho = (b3 - b2) / (2.0 * r2 * xstar)
        j = np.arange(c)
        beta = beta1 * rho ** j
        alpha = np.zeros(c)
        gamma = lam - beta
        zeta = lam * b3 - (b3 - b2) * float(beta[-1])
    return DualCertificate(
        program="three_piece", zeta=float(zeta), alpha=alpha, beta=beta,
        gamma=gamma, params={"r1": r1, "r2": r2, "b2": b2, "b3": b3,
                             "case": case},
    )


def build_dual_static(inst: ProblemInstance, r: float, b: float,
                      q: float) -> DualCertificate:
    """Certificate against the static policy at admission probability q.

    Needs g <= r x + b with equality at x*; the two branches (q above or
    below x*) use different multiplier ladders, both certifying a
    Theta(sqrt(c))-sized loss for every static price.
    """
    if not (r > 0.0 and b > 0.0):
        raise ValueError("need r, b > 0")
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    c, lam, xstar = inst.c, inst.lam, inst.x_star
    gstar = float(inst.g(xstar))
    maj = lambda x: r * np.asarray(x, dtype=float) + b
    _check_majorant(inst.g, maj, "linear majorant")
    if abs(gstar - (r * xstar + b)) > 1e-9 * (1 + gstar):
        raise ValueError("linear majorant must touch g at x*")
    j = np.arange(1, c + 1)
    sq = math.sqrt(c)
    if q >= xstar:
        beta = (lam * b / xstar) * np.maximum(1.0 - j / sq, 0.0)
        zeta = lam * gstar - min(b, r * xstar / 2.0) * lam / sq
    else:
        beta = (lam * r / 2.0) * np.maximum(-j / sq, -math.floor(sq) / sq)
        zeta = lam * gstar - lam * r * xstar / (4.0 * sq)
    return DualCertificate(
        program="static_price", zeta=float(zeta), alpha=None, beta=beta,
        gamma=None, params={"r": r, "b": b, "q": q, "gstar": gstar},
    )


# ---------------------------------------------------------------------------
# verification


def _primal_reference(inst: ProblemInstance, pieces, program):
    """Optimum of the relaxed majorant LP (exact via simplex at small c,
    else the full policy LP on the majorant, which it dominates)."""
    if program == "static_price":
        r, b, q = pieces
        blocked = erlang_stockout(inst.c, inst.lam * q * inst.d)
        return inst.lam * (1.0 - blocked) * (r * q + b), "static closed form"
    if inst.c <= _LP_REFERENCE_LIMIT:
        lp = build_lpsd(inst, pieces=pieces, monotone=False)
        sol = lp_solve(lp)
        if sol.status is LpStatus.OPTIMAL:
            return sol.objective, "relaxed LP (simplex)"
    gain, _, _, gap, _ = _chain_sdopt(inst, pieces=pieces)
    return gain + gap, "policy LP on majorant (chain)"


def verify_dual(cert: DualCertificate, inst: ProblemInstance) -> VerificationReport:
    """Re-check every dual constraint and weak duality against a primal.

    PASS requires: multiplier signs respected, the per-state equality
    alpha + beta (+ gamma) = lambda exact to tolerance, every zeta
    constraint satisfied, and zeta >= primal reference - tolerance.
    The tolerance scales with lam g(x*).
    """
    c, lam, d, xstar = inst.c, inst.lam, inst.d, inst.x_star
    tol = 1e-8 * (1.0 + lam * float(inst.g(xstar)))
    failures = []

    if cert.program == "two_slope":
        R, r = cert.params["R"], cert.params["r"]
        gstar = cert.params["gstar"]
        a = np.asarray(cert.alpha, dtype=float)
        bta = np.asarray(cert.beta, dtype=float)
        if len(a) != c or len(bta) != c:
            raise ValueError("certificate dimension mismatch")
        eq = np.abs(a + bta - lam)
        min_mult = float(min(a.min(), bta.min()))
        a_pad = np.concatenate([a, [0.0]])
        b_pad = np.concatenate([bta, [0.0]])
        jj = np.arange(1, c + 1)
        rhs = (lam * gstar - R * xstar * a - r * xstar * bta
               + (c - jj) / (lam * d) * (R * a_pad[1:] + r * b_pad[1:]))
        rhs0 = R * xstar * a[0] + r * xstar * bta[0]
        viol = np.concatenate([rhs - cert.zeta, [rhs0 - cert.zeta]])
        names = [f"pi_{j}" for j in range(1, c + 1)] + ["pi_0"]
        pieces = [(gstar - R * xstar, R), (gstar - r * xstar, r)]
    elif cert.program == "three_piece":
        p = cert.params
        r1, r2, b2, b3 = p["r1"], p["r2"], p["b2"], p["b3"]
        a = np.asarray(cert.alpha, dtype=float)
        bta = np.asarray(cert.beta, dtype=float)
        gam = np.asarray(cert.gamma, dtype=float)
        if len(a) != c or len(bta) != c or len(gam) != c:
            raise ValueError("certificate dimension mismatch")
        eq = np.abs(a + bta + gam - lam)
        min_mult = float(min(a.min(), bta.min(), gam.min()))
        jj = np.arange(1, c)
        rhs_mid = (bta[:-1] * b2 + gam[:-1] * b3
                   + (c - jj) / (lam * d) * (a[1:] * r1 + bta[1:] * r2))
        rhs_c = bta[-1] * b2 + gam[-1] * b3
        rhs0 = a[0] * r1 * xstar + bta[0] * r2 * xstar
        viol = np.concatenate([rhs_mid - cert.zeta,
                               [rhs_c - cert.zeta, rhs0 - cert.zeta]])
        names = [f"pi_{j}" for j in range(1, c)] + ["pi_c", "pi_0"]
        pieces = [(0.0, r1), (b2, r2), (b3, 0.0)]
    elif cert.program == "static_price":
        p = cert.params
        r, b, q, gstar = p["r"], p["b"], p["q"], p["gstar"]
        bta = np.asarray(cert.beta, dtype=float)
        if len(bta) != c:
            raise ValueError("certificate dimension mismatch")
        eq = np.zeros(1)
        min_mult = 0.0          # beta is sign-free in this program
        jj = np.arange(1, c)
        rhs_mid = (lam * r * (c - jj) / (lam * d) + lam * b
                   - bta[:-1] * q + bta[1:] * (c - jj) / (lam * d))
        rhs0 = lam * r * xstar + bta[0] * xstar
        rhs_c = lam * b - bta[-1] * q
        viol = np.concatenate([rhs_mid - cert.zeta,
                               [rhs0 - cert.zeta, rhs_c - cert.zeta]])
        names = [f"pi_{j}" for j in range(1, c)] + ["pi_0", "pi_c"]
        pieces = (r, b, q)
    else:
        raise ValueError(f"unknown program {cert.program!r}")

    for k in np.nonzero(viol > tol)[0]:
        failures.append((names[int(k)], float(viol[int(k)])))
    if eq.max() > tol:
        failures.append(("multiplier sum", float(eq.max())))
    if min_mult < -1e-12 * lam:
        failures.append(("multiplier sign", min_mult))

    ref, ref_name = _primal_reference(inst, pieces, cert.program)
    margin = cert.zeta - ref
    if margin < -1e-6 * (1.0 + abs(ref)):
        failures.append(("weak duality", float(margin)))

    return VerificationReport(
        passed=not failures,
        max_equality_violation=float(eq.max()),
        max_constraint_violation=float(viol.max()),
        min_multiplier=min_mult,
        weak_duality_margin=float(margin),
        reference=ref_name,
        failures=failures,
    )
