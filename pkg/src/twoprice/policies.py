"""Policy construction and optimization.

Four policy classes over a single reusable resource, in increasing
generality: the fluid (certainty-equivalent) static policy, the optimal
static policy, two-price policies (static below a stock threshold,
looser above), and fully stock-dependent policies.

The stock-dependent optimum is found by solving the policy LP.  Two
interchangeable routes are provided:

* ``method="lp"``     -- build the LP reformulation explicitly (variables
  pi_0..pi_c and per-state reward terms) and solve it with the dense
  simplex engine; practical up to a few hundred units.
* ``method="chain"``  -- exploit the birth-death structure directly:
  Howard policy iteration over the kink candidates of g, with
  closed-form relative values from the stationary flow balance.  Runs
  in O(c) per iteration and is exact at any scale.

Both routes agree to solver tolerance; the chain route also emits a
Bellman-residual certificate that upper-bounds the true optimum.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from .equilibrium import (
    ProblemInstance,
    StockDependentPolicy,
    erlang_stockout,
    fluid_value,
    log_stationary_weights,
    stationary_distribution,
    steady_state,
)
from .lp import LinearProgram, LpStatus, solve as lp_solve
from .reward import RewardFunction, ShapeModel, classify_shape, min_affine

__all__ = [
    "TwoPricePolicy",
    "OptimizationReport",
    "fluid_policy",
    "optimize_static",
    "two_price_theoretical",
    "optimize_two_price",
    "optimize_stock_dependent",
    "concavity_selfcheck",
    "build_lpsd",
]


@dataclass(frozen=True)
class TwoPricePolicy:
    """Admission x_l for stock <= tau, x_h above."""

    x_l: float
    x_h: float
    tau: int

    def __post_init__(self):
        if not (0.0 <= self.x_l <= 1.0 and 0.0 <= self.x_h <= 1.0):
            raise ValueError("admission probabilities must lie in [0, 1]")
        if self.x_l > self.x_h + 1e-12:
            raise ValueError("need x_l <= x_h")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")

    def expand(self, c: int) -> StockDependentPolicy:
        if self.tau > c:
            raise ValueError(f"tau = {self.tau} exceeds c = {c}")
        j = np.arange(1, c + 1)
        return StockDependentPolicy(np.where(j <= self.tau, self.x_l, self.x_h))


@dataclass
class OptimizationReport:
    policy: object
    reward: float
    loss: float
    method: str
    bracket: tuple
    iterations: int = 0
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        lo, hi = self.bracket
        if not (lo <= self.reward + 1e-9 and self.reward <= hi + 1e-9):
            raise ValueError("reward must lie inside its bracket")


# ---------------------------------------------------------------------------
# simple policies


def fluid_policy(inst: ProblemInstance) -> StockDependentPolicy:
    """Static policy at the fluid optimum x* = min(1, c/(lambda d))."""
    return StockDependentPolicy(np.full(inst.c, min(1.0, inst.x_star)))


def _static_reward(inst, q):
    a = inst.lam * q * inst.d
    return (1.0 - erlang_stockout(inst.c, a)) * inst.lam * float(inst.g(q))


def optimize_static(inst: ProblemInstance, n_starts: int = 16) -> OptimizationReport:
    """Best single admission probability: max_q (1 - B(c, lam q d)) lam g(q).

    The objective is searched per concavity segment of g (scalar bounded
    minimization) plus a multistart grid, and the fluid point is always
    included as a candidate so the result dominates the fluid policy.
    """
    kinks = inst.g.breakpoints()
    edges = np.unique(np.concatenate([[0.0, 1.0], kinks,
                                      [min(1.0, inst.x_star)],
                                      np.linspace(0.0, 1.0, n_starts + 1)]))
    best_q, best_v = 0.0, 0.0
    evals = 0
    for lo, hi in zip(edges, edges[1:]):
        if hi - lo < 1e-12:
            continue
        res = minimize_scalar(lambda q: -_static_reward(inst, q),
                              bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-11})
        evals += res.nfev
        if -res.fun > best_v:
            best_q, best_v = float(res.x), float(-res.fun)
    for q in np.concatenate([edges, [min(1.0, inst.x_star)]]):
        v = _static_reward(inst, float(q))
        evals += 1
        if v > best_v:
            best_q, best_v = float(q), v
    policy = StockDependentPolicy(np.full(inst.c, best_q))
    ss = steady_state(inst, policy)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        flu = fluid_value(inst)
    return OptimizationReport(
        policy=policy, reward=ss.reward, loss=flu - ss.reward,
        method="static_opt", bracket=(ss.reward, flu), iterations=evals,
        diagnostics={"q": best_q},
    )


def two_price_theoretical(inst: ProblemInstance, shape: ShapeModel) -> TwoPricePolicy:
    """Two-price parameters from the asymptotic recipe.

    delta(c) = c^(-1/(alpha+1)) for finite alpha > 1 and delta = eps for
    locally linear rewards; the threshold solves
    (1 + delta/x*)^tau ~ c.  The recipe is undefined at alpha = 1 (use
    :func:`optimize_two_price` there).
    """
    if shape.alpha <= 1.0:
        raise ValueError("theoretical recipe requires alpha > 1")
    xstar = inst.x_star
    if not 0.0 < xstar < 1.0:
        raise ValueError("x* must lie in (0, 1)")
    if math.isinf(shape.alpha):
        delta = shape.eps
    else:
        delta = inst.c ** (-1.0 / (shape.alpha + 1.0))
    clamp = min(xstar / 2.0, (1.0 - xstar) / 2.0)
    if delta > clamp:
        warnings.warn(f"two-price delta clamped from {delta:.4g} to {clamp:.4g}",
                      stacklevel=2)
        delta = clamp
    tau = math.ceil(math.log(inst.c) / math.log1p(delta / xstar))
    if tau < 1:
        tau = 1
    if tau > inst.c:
        warnings.warn(f"two-price threshold clamped from {tau} to c = {inst.c}",
                      stacklevel=2)
        tau = inst.c
    return TwoPricePolicy(x_l=xstar - delta, x_h=xstar + delta, tau=tau)


# ---------------------------------------------------------------------------
# two-price optimization


def _two_price_reward(inst, xl, xh, tau, flu):
    j = np.arange(1, inst.c + 1)
    x = np.where(j <= tau, xl, xh)
    pi = stationary_distribution(inst.c, inst.lam, inst.d, x)
    return float(np.dot(pi[1:], inst.lam * inst.g(x)))


def optimize_two_price(inst: ProblemInstance, seed: int = 0) -> OptimizationReport:
    """Search over thresholds and price pairs for the best two-price policy.

    The threshold loop is exhaustive up to c = 4096 and a geometric
    subsample of 256 values above (the loss is empirically unimodal in
    tau), followed by +-3 local refinement.  For each threshold a
    2-D Nelder-Mead over (x_l, x_h) is warm-started from the previous
    optimum; global seeds come from the symmetric theoretical point, the
    kinks of g adjacent to x*, the policy-LP optimum when it happens to
    be two-valued, and the optimal static policy (so the result
    dominates it by construction).  Ties break lexicographically by
    (reward, -tau, -x_h).
    """
    c, xstar = inst.c, min(1.0, inst.x_star)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        flu = fluid_value(inst)
    rng = np.random.default_rng(seed)
    evals = 0

    if c <= 4096:
        taus = list(range(1, c + 1))
    else:
        taus = sorted({int(round(t)) for t in np.geomspace(1, c, 256)})

    def reward_of(xl, xh, tau):
        nonlocal evals
        evals += 1
        xl = min(max(xl, 0.0), 1.0)
        xh = min(max(xh, 0.0), 1.0)
        if xl > xh:
            xl, xh = xh, xl
        return _two_price_reward(inst, xl, xh, tau, flu)

    # global seed points
    static = optimize_static(inst)
    q = static.diagnostics["q"]
    pairs = [(q, q)]
    kinks = inst.g.breakpoints()
    lo_k = [t for t in kinks if t < xstar - 1e-9]
    hi_k = [t for t in kinks if t > xstar + 1e-9]
    if lo_k and hi_k:
        pairs.append((max(lo_k), min(hi_k)))
    if 0 < xstar < 1:
        d0 = min(c ** (-1.0 / 3.0), xstar / 2, (1 - xstar) / 2)
        pairs.append((xstar - d0, xstar + d0))
        d1 = min(xstar, 1 - xstar) / 2
        pairs.append((xstar - d1, xstar + d1))
    if inst.g.is_min_affine:
        sd = optimize_stock_dependent(inst)
        vals = np.unique(np.round(sd.policy.x, 12))
        if len(vals) == 2:
            tau_sd = int(np.sum(sd.policy.x <= vals[0] + 1e-12))
            pairs.append((float(vals[0]), float(vals[1])))
            taus = sorted(set(taus) | {max(1, tau_sd)})

    best = (-np.inf, None)  # (reward, (xl, xh, tau))

    def consider(r, xl, xh, tau):
        nonlocal best
        xl = min(max(xl, 0.0), 1.0)
        xh = min(max(xh, 0.0), 1.0)
        if xl > xh:
            xl, xh = xh, xl
        key = (r, -tau, -xh)
        cur = (best[0], -best[1][2], -best[1][1]) if best[1] else (-np.inf, 0, 0)
        if key > cur:
            best = (r, (xl, xh, tau))

    for (xl, xh) in pairs:
        for tau in taus:
            consider(reward_of(xl, xh, tau), xl, xh, tau)

    warm = best[1][:2] if best[1] else (xstar / 2, (1 + xstar) / 2)
    for tau in taus:
        res = minimize(lambda p: -reward_of(p[0], p[1], tau), list(warm),
                       method="Nelder-Mead",
                       options={"xatol": 1e-7, "fatol": 1e-10, "maxiter": 150})
        consider(-res.fun, float(np.clip(res.x[0], 0, 1)),
                 float(np.clip(res.x[1], 0, 1)), tau)
        warm = (float(np.clip(res.x[0], 0, 1)), float(np.clip(res.x[1], 0, 1)))

    # local tau refinement + seeded restarts around the incumbent
    r0, (xl0, xh0, tau0) = best
    edge = 0.25 * min(xstar, 1 - xstar) if 0 < xstar < 1 else 0.25
    for tau in range(max(1, tau0 - 3), min(c, tau0 + 3) + 1):
        starts = [(xl0, xh0)] + [
            (xl0 + edge * rng.uniform(-1, 1), xh0 + edge * rng.uniform(-1, 1))
            for _ in range(4)
        ]
        for s in starts:
            res = minimize(lambda p: -reward_of(p[0], p[1], tau), list(s),
                           method="Nelder-Mead",
                           options={"xatol": 1e-9, "fatol": 1e-12, "maxiter": 400})
            consider(-res.fun, float(np.clip(res.x[0], 0, 1)),
                     float(np.clip(res.x[1], 0, 1)), tau)

    r, (xl, xh, tau) = best
    policy = TwoPricePolicy(x_l=xl, x_h=xh, tau=tau)
    ss = steady_state(inst, policy.expand(c))
    return OptimizationReport(
        policy=policy, reward=ss.reward, loss=flu - ss.reward,
        method="two_price_opt", bracket=(ss.reward, flu), iterations=evals,
        diagnostics={"tau": tau, "static_reward": static.reward},
    )


# ---------------------------------------------------------------------------
# stock-dependent optimum: LP construction


def build_lpsd(inst: ProblemInstance, pieces=None,
               monotone: bool = True) -> LinearProgram:
    """LP over (pi_0..pi_c, g_1..g_c) whose optimum is the best
    stock-dependent reward for a min-affine g.

    Constraints per state j: g_j <= a_k pi_j + b_k rho_j pi_{j-1} for
    every piece, pi_j >= rho_j pi_{j-1} (admission probability <= 1),
    and the pi sum to one; rho_j = (c-j+1)/(lambda d).  Dropping the
    monotonicity rows (``monotone=False``) yields the relaxed program
    used by the dual certificates.
    """
    pieces = pieces if pieces is not None else inst.g.min_affine_pieces()
    c = inst.c
    n = 2 * c + 1
    m_rows = (len(pieces) + (1 if monotone else 0)) * c + 1
    A = np.zeros((m_rows, n))
    rhs = np.zeros(m_rows)
    rel = []
    r = 0
    for j in range(1, c + 1):
        rho = (c - j + 1) / (inst.lam * inst.d)
        for a, b in pieces:
            A[r, c + j] = 1.0
            A[r, j] = -a
            A[r, j - 1] = -b * rho
            rel.append("<=")
            r += 1
        if monotone:
            A[r, j] = -1.0
            A[r, j - 1] = rho
            rel.append("<=")
            r += 1
    A[r, : c + 1] = 1.0
    rhs[r] = 1.0
    rel.append("=")
    obj = np.zeros(n)
    obj[c + 1:] = inst.lam
    lb = np.concatenate([np.zeros(c + 1), np.full(c, -np.inf)])
    return LinearProgram(objective=obj, rows=A, relations=rel, rhs=rhs, lb=lb)


def _recover_policy(inst, pi):
    """x_j = min(1, rho_j pi_{j-1} / pi_j); unreachable states get x = 1."""
    c = inst.c
    x = np.empty(c)
    for j in range(1, c + 1):
        rho = (c - j + 1) / (inst.lam * inst.d)
        if pi[j] > 1e-14:
            x[j - 1] = min(1.0, max(0.0, rho * pi[j - 1] / pi[j]))
        else:
            x[j - 1] = 1.0
    return StockDependentPolicy(x)


# ---------------------------------------------------------------------------
# stock-dependent optimum: birth-death policy iteration


def _reward_candidates(g: RewardFunction):
    xs = np.unique(np.concatenate([[0.0, 1.0], np.asarray(g.breakpoints())]))
    return xs, np.asarray(g(xs), dtype=float)


def _relative_value_gaps(c, lam, d, x, reward_rate):
    """Stationary gain and the relative-value gaps h_{j+1} - h_j.

    The average-reward evaluation equations form a second-order
    recursion whose growing mode points away from the distribution's
    peak in both directions, so the gaps are integrated from each chain
    end toward the peak (upward from the stock-out boundary, downward
    from the terminal state), where both sweeps are contracting.  This
    stays accurate even at states whose stationary mass underflows.
    """
    logw = log_stationary_weights(c, lam, d, x)
    w = np.exp(logw - logw.max())
    pi = w / w.sum()
    r = np.concatenate([[0.0], np.asarray(reward_rate, dtype=float)])
    gain = float(pi @ r)
    up = (c - np.arange(0, c + 1)) / d          # up[j] = (c-j)/d
    dn = np.concatenate([[0.0], lam * np.asarray(x, dtype=float)])
    peak = int(np.argmax(logw))
    gaps = np.zeros(c)                          # gaps[k] = h_{k+1} - h_k
    gaps[0] = gain * d / c
    for j in range(1, min(peak, c)):            # states below the peak
        gaps[j] = (gain - r[j] + dn[j] * gaps[j - 1]) / up[j]
    if peak < c:
        if dn[c] > 0.0:
            gaps[c - 1] = (r[c] - gain) / dn[c]
        for j in range(c - 1, peak, -1):        # states above the peak
            if dn[j] <= 0.0:
                gaps[j - 1] = 0.0               # unreachable-from-above gap
                continue
            gaps[j - 1] = (up[j] * gaps[j] + r[j] - gain) / dn[j]
    return gain, gaps, pi


def _chain_sdopt(inst: ProblemInstance, pieces=None, max_iter=1000):
    """Policy iteration over the kink candidates of g (exact optimum)."""
    if pieces is None:
        xs, gs = _reward_candidates(inst.g)
    else:
        gf = min_affine(pieces, origin_free=True)
        xs, gs = _reward_candidates(gf)
    c, lam, d = inst.c, inst.lam, inst.d
    slopes = np.diff(gs) / np.diff(xs) if len(xs) > 1 else np.array([])

    def improve(gaps):
        if len(xs) == 1:
            return np.full(c, xs[0])
        idx = np.searchsorted(-slopes, -gaps, side="right")
        return xs[idx]

    def rate_of(x):
        if pieces is None:
            return lam * np.asarray(inst.g(x), dtype=float)
        return lam * np.asarray(gf(x), dtype=float)

    x = np.full(c, min(1.0, inst.x_star))
    gain, gaps, pi = _relative_value_gaps(c, lam, d, x, rate_of(x))
    iters = 0
    for iters in range(1, max_iter + 1):
        xn = improve(gaps)
        if np.array_equal(xn, x):
            break
        gain_n, gaps_n, pi_n = _relative_value_gaps(c, lam, d, xn, rate_of(xn))
        if gain_n <= gain + 1e-13 * (1.0 + abs(gain)):
            break
        x, gain, gaps, pi = xn, gain_n, gaps_n, pi_n

    # Bellman residual: for any value vector, the optimal gain is at most
    # gain + max_j residual_j (uniformized average-reward bound).
    if len(xs) > 1:
        idx = np.searchsorted(-slopes, -gaps, side="right")
        best = lam * (gs[idx] - xs[idx] * gaps)
    else:
        best = lam * (gs[0] - xs[0] * gaps)
    up = (c - np.arange(1, c + 1)) / d
    resid = best - gain
    resid[: c - 1] += up[: c - 1] * gaps[1:]
    gap_bound = max(0.0, float(np.max(resid)))
    return gain, StockDependentPolicy(x), iters, gap_bound, pi


def _support_grid(xstar, m):
    """m supports with 3/4 log-clustered within 0.1 of x*, rest uniform."""
    near = min(0.1, xstar, 1.0 - xstar)
    half = max((3 * m // 4) // 2, 2)
    offs = np.geomspace(1e-6 * near, near, half)
    rest = max(m - 2 * half, 2)
    pts = np.concatenate([np.linspace(0.0, 1.0, rest), [xstar],
                          xstar - offs, xstar + offs])
    return np.unique(np.clip(pts, 0.0, 1.0))


def _tangent_pieces(g, grid):
    out = []
    for t in grid:
        s_lo, s_hi = g.supergradient_interval(float(t))
        s = 0.5 * (s_lo + s_hi)
        out.append((float(g(t)) - s * float(t), s))
    return out


def _chord_pieces(g, grid):
    vals = np.asarray(g(grid), dtype=float)
    out = []
    for (x1, y1), (x2, y2) in zip(zip(grid, vals), zip(grid[1:], vals[1:])):
        b = (y2 - y1) / (x2 - x1)
        out.append((float(y1 - b * x1), float(b)))
    return out


def optimize_stock_dependent(inst: ProblemInstance, method: str = "auto",
                             bracket_tol: float = 2.0,
                             max_pieces: int = 1024) -> OptimizationReport:
    """Optimal stock-dependent policy.

    Min-affine rewards are solved exactly (``chain`` policy iteration by
    default, explicit ``lp`` route on request).  Smooth rewards are
    sandwiched between a tangent majorant and a chord minorant with the
    support count doubled until the reward bracket is narrower than
    ``bracket_tol``; the returned policy is the minorant optimizer
    re-evaluated under the true g, so its reward is a certified lower
    bracket end.
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        flu = fluid_value(inst)
    if method == "auto":
        method = "chain" if inst.g.is_min_affine else "bracket"

    if method == "lp":
        lp = build_lpsd(inst)
        sol = lp_solve(lp)
        if sol.status is not LpStatus.OPTIMAL:
            raise RuntimeError(f"policy LP unexpectedly {sol.status.value}")
        policy = _recover_policy(inst, sol.x[: inst.c + 1])
        ss = steady_state(inst, policy)
        return OptimizationReport(
            policy=policy, reward=ss.reward, loss=flu - ss.reward,
            method="sd_opt", bracket=(ss.reward, min(flu, sol.objective)),
            iterations=0, diagnostics={"route": "lp", "lp_objective": sol.objective},
        )

    if method == "chain":
        if not inst.g.is_min_affine:
            raise ValueError("chain route requires a min-affine reward")
        gain, policy, iters, gap, _ = _chain_sdopt(inst)
        ss = steady_state(inst, policy)
        upper = min(flu, gain + gap)
        return OptimizationReport(
            policy=policy, reward=ss.reward, loss=flu - ss.reward,
            method="sd_opt", bracket=(ss.reward, max(upper, ss.reward)),
            iterations=iters,
            diagnostics={"route": "chain", "bellman_gap": gap},
        )

    if method != "bracket":
        raise ValueError(f"unknown method {method!r}")

    m = 32
    xstar = min(1.0, inst.x_star)
    while True:
        grid = _support_grid(xstar, m)
        upper_gain, _, it_u, gap_u, _ = _chain_sdopt(inst, _tangent_pieces(inst.g, grid))
        _, lo_policy, it_l, _, _ = _chain_sdopt(inst, _chord_pieces(inst.g, grid))
        ss = steady_state(inst, lo_policy)
        upper = min(flu, upper_gain + gap_u)
        if upper - ss.reward <= bracket_tol or m >= max_pieces:
            return OptimizationReport(
                policy=lo_policy, reward=ss.reward, loss=flu - ss.reward,
                method="sd_opt", bracket=(ss.reward, max(upper, ss.reward)),
                iterations=it_u + it_l,
                diagnostics={"route": "bracket", "supports": int(m)},
            )
        m *= 2


# ---------------------------------------------------------------------------
# convexity self-check of the policy program


def _occupancy_objective(inst, pi):
    """sum_j pi_j lam g(x_j(pi)) with the 0 * g(0/0) := 0 convention."""
    c = inst.c
    total = 0.0
    for j in range(1, c + 1):
        if pi[j] <= 0.0:
            continue
        rho = (c - j + 1) / (inst.lam * inst.d)
        x = min(1.0, rho * pi[j - 1] / pi[j])
        total += pi[j] * inst.lam * float(inst.g(x))
    return total


def concavity_selfcheck(inst: ProblemInstance, trials: int, seed: int = 0) -> dict:
    """Empirically verify concavity of the occupancy-measure objective.

    Draws random feasible pairs (stationary laws of random policies),
    checks midpoint concavity, and verifies the optimal law has full
    support whenever g is strictly increasing at zero.
    """
    rng = np.random.default_rng(seed)
    violations = 0
    worst = 0.0
    for _ in range(trials):
        x1 = rng.uniform(0.01, 1.0, size=inst.c)
        x2 = rng.uniform(0.01, 1.0, size=inst.c)
        p1 = stationary_distribution(inst.c, inst.lam, inst.d, x1)
        p2 = stationary_distribution(inst.c, inst.lam, inst.d, x2)
        mid = 0.5 * (p1 + p2)
        vmid = _occupancy_objective(inst, mid)
        vavg = 0.5 * (_occupancy_objective(inst, p1) + _occupancy_objective(inst, p2))
        slack = vmid - vavg
        worst = min(worst, slack)
        if slack < -1e-9 * (1.0 + abs(vavg)):
            violations += 1
    report = {"trials": trials, "violations": violations, "worst_slack": worst}
    if inst.g.is_min_affine:
        opt = optimize_stock_dependent(inst)
        pi_opt = stationary_distribution(inst.c, inst.lam, inst.d, opt.policy.x)
        report["min_pi_opt"] = float(pi_opt.min())
        report["all_positive"] = bool(pi_opt.min() > 0.0) \
            if float(inst.g(1e-9)) > 0.0 else None
    return report
