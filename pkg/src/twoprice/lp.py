"""Dense linear-programming solver (two-phase revised simplex).

Self-contained engine for the policy LP reformulation and the dual
certificate checks.  Problems are stated as maximizations over
continuous variables with general row relations and box bounds:

    max c'x  s.t.  A_i x (<= | = | >=) b_i,  lb <= x <= ub.

The solver is deterministic: Dantzig pricing with lowest-index tie
breaks, switching to Bland's rule after a run of stalled (degenerate)
pivots, which suffices for the degenerate LPs produced by kinked reward
functions.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

__all__ = ["LinearProgram", "LpSolution", "LpStatus", "solve"]

_PIVOT_TOL = 1e-10
_FEAS_TOL = 1e-8
_REFACTOR_EVERY = 150


class LpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


@dataclass
class LinearProgram:
    """max objective @ x subject to rows and box bounds (default x >= 0)."""

    objective: np.ndarray
    rows: np.ndarray
    relations: list
    rhs: np.ndarray
    lb: np.ndarray = None
    ub: np.ndarray = None

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=float)
        self.rows = np.atleast_2d(np.asarray(self.rows, dtype=float))
        self.rhs = np.asarray(self.rhs, dtype=float)
        n = len(self.objective)
        m = len(self.rhs)
        if self.rows.shape != (m, n):
            raise ValueError(f"constraint matrix shape {self.rows.shape} != ({m},{n})")
        if len(self.relations) != m:
            raise ValueError("one relation per row required")
        for r in self.relations:
            if r not in ("<=", "=", ">="):
                raise ValueError(f"bad relation {r!r}")
        self.lb = np.zeros(n) if self.lb is None else np.asarray(self.lb, dtype=float)
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float)
        if len(self.lb) != n or len(self.ub) != n:
            raise ValueError("bound length mismatch")
        for arr in (self.objective, self.rows, self.rhs):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite coefficient")
        if np.any(self.lb > self.ub):
            raise ValueError("lb > ub")

    @property
    def n(self):
        return len(self.objective)

    @property
    def m(self):
        return len(self.rhs)


@dataclass
class LpSolution:
    status: LpStatus
    x: np.ndarray = None
    duals: np.ndarray = None
    objective: float = float("nan")
    residuals: dict = field(default_factory=dict)


class _Tableau:
    """Standard-form data: max c'z, Az = b, z >= 0, with a known start basis."""

    def __init__(self, A, b, c, basis, n_real, refactor_every=_REFACTOR_EVERY):
        self.A, self.b, self.c = A, b, c
        self.basis = list(basis)
        self.n_real = n_real          # columns beyond are artificials
        self.m, self.n = A.shape
        self.refactor_every = refactor_every
        self._refactor()

    def _refactor(self):
        B = self.A[:, self.basis]
        self.Binv = np.linalg.inv(B)
        self.xb = self.Binv @ self.b

    def _pivot(self, enter, leave_pos):
        col = self.Binv @ self.A[:, enter]
        piv = col[leave_pos]
        self.Binv[leave_pos] /= piv
        others = np.arange(self.m) != leave_pos
        self.Binv[others] -= np.outer(col[others], self.Binv[leave_pos])
        self.basis[leave_pos] = enter
        self.xb = self.Binv @ self.b

    def run(self, allowed, max_iter=None):
        """Simplex iterations over `allowed` columns; returns status string."""
        max_iter = max_iter or 50 * (self.m + self.n)
        stall_limit = 3 * (self.m + self.n)
        stalled = 0
        bland = False
        allowed = np.asarray(sorted(allowed))
        banned = set()
        for it in range(max_iter):
            if it and it % self.refactor_every == 0:
                self._refactor()
            y = self.c[self.basis] @ self.Binv
            rc = self.c[allowed] - y @ self.A[:, allowed]
            blocked = np.isin(allowed, self.basis)
            if banned:
                blocked |= np.isin(allowed, list(banned))
            rc = np.where(blocked, -np.inf, rc)
            if bland or stalled > stall_limit:
                cand = np.nonzero(rc > _PIVOT_TOL)[0]
                if len(cand) == 0:
                    return "optimal"
                enter = allowed[cand[0]]
                bland = True
            else:
                k = int(np.argmax(rc))
                if rc[k] <= _PIVOT_TOL:
                    return "optimal"
                enter = allowed[k]

            def ratio_test(col):
                pos = col > _PIVOT_TOL
                if not np.any(pos):
                    return None
                xb = np.maximum(self.xb, 0.0)
                safe = np.where(pos, col, 1.0)
                ratios = np.where(pos, xb / safe, np.inf)
                # Harris two-pass: relaxed limit, then largest pivot
                limit = np.min(np.where(pos, (xb + 1e-9) / safe, np.inf))
                elig = np.nonzero(pos & (ratios <= limit))[0]
                if bland:
                    pos_i = int(elig[np.argmin(np.asarray(self.basis)[elig])])
                else:
                    pos_i = int(elig[np.argmax(col[elig])])
                return pos_i, ratios[pos_i]

            col = self.Binv @ self.A[:, enter]
            hit = ratio_test(col)
            if hit is None or col[hit[0]] < 1e-8:
                # suspicious: refresh the factorization and re-validate
                self._refactor()
                y = self.c[self.basis] @ self.Binv
                if self.c[enter] - y @ self.A[:, enter] <= _PIVOT_TOL:
                    banned.add(int(enter))   # stale pricing, re-price
                    continue
                col = self.Binv @ self.A[:, enter]
                hit = ratio_test(col)
                if hit is None:
                    return "unbounded"
                if col[hit[0]] < 1e-8:
                    banned.add(int(enter))   # error-level column
                    continue
            leave_pos, step = hit
            banned.clear()
            stalled = stalled + 1 if step <= 1e-12 else 0
            self._pivot(enter, leave_pos)
        raise RuntimeError("simplex iteration limit exceeded")

    def objective_value(self):
        return float(self.c[self.basis] @ self.xb)

    def duals(self):
        return self.c[self.basis] @ self.Binv


def _to_standard(lp: LinearProgram):
    """Rewrite with shifted/split variables and slack columns, b >= 0."""
    n = lp.n
    col_map = []        # per original var: ("shift", col, lb) | ("mirror", col, ub) | ("split", c+, c-)
    cols = []
    cobj = []
    shift_obj = 0.0
    A_parts = []
    b = lp.rhs.astype(float).copy()
    rows = lp.rows
    ub_rows = []

    next_col = 0
    for j in range(n):
        lo, hi = lp.lb[j], lp.ub[j]
        if np.isfinite(lo):
            col_map.append(("shift", next_col, lo))
            cols.append(rows[:, j])
            cobj.append(lp.objective[j])
            b -= rows[:, j] * lo
            shift_obj += lp.objective[j] * lo
            if np.isfinite(hi):
                ub_rows.append((next_col, hi - lo))
            next_col += 1
        elif np.isfinite(hi):
            col_map.append(("mirror", next_col, hi))
            cols.append(-rows[:, j])
            cobj.append(-lp.objective[j])
            b -= rows[:, j] * hi
            shift_obj += lp.objective[j] * hi
            next_col += 1
        else:
            col_map.append(("split", next_col, next_col + 1))
            cols.append(rows[:, j])
            cobj.append(lp.objective[j])
            cols.append(-rows[:, j])
            cobj.append(-lp.objective[j])
            next_col += 2

    A = np.column_stack(cols) if cols else np.zeros((lp.m, 0))
    rel = list(lp.relations)
    m_extra = len(ub_rows)
    if m_extra:
        A = np.vstack([A, np.zeros((m_extra, A.shape[1]))])
        for i, (col, val) in enumerate(ub_rows):
            A[lp.m + i, col] = 1.0
        b = np.concatenate([b, [v for _, v in ub_rows]])
        rel += ["<="] * m_extra

    # orient rows so b >= 0
    row_sign = np.ones(len(b))
    for i in range(len(b)):
        if b[i] < 0:
            A[i] *= -1.0
            b[i] *= -1.0
            row_sign[i] = -1.0
            rel[i] = {"<=": ">=", ">=": "<=", "=": "="}[rel[i]]
    return A, b, rel, np.array(cobj), shift_obj, col_map, row_sign


def solve(lp: LinearProgram) -> LpSolution:
    """Solve to optimality, returning primal, duals, and audit residuals.

    On (rare) numerical breakdown of the updated basis inverse the solve
    restarts once with a much shorter refactorization interval.
    """
    try:
        return _solve_once(lp, refactor_every=_REFACTOR_EVERY)
    except np.linalg.LinAlgError:
        return _solve_once(lp, refactor_every=5)


def _solve_once(lp: LinearProgram, refactor_every: int) -> LpSolution:
    A0, b, rel, cobj, shift_obj, col_map, row_sign = _to_standard(lp)
    m, n_struct = A0.shape

    slack_cols = []
    art_rows = []
    blocks = [A0]
    for i, r in enumerate(rel):
        if r == "<=":
            e = np.zeros((m, 1)); e[i, 0] = 1.0
            blocks.append(e)
            slack_cols.append((i, len(slack_cols)))
        elif r == ">=":
            e = np.zeros((m, 1)); e[i, 0] = -1.0
            blocks.append(e)
            slack_cols.append((i, len(slack_cols)))
            art_rows.append(i)
        else:
            art_rows.append(i)
    n_slack = len(slack_cols)
    A = np.hstack(blocks) if len(blocks) > 1 else A0
    n_real = n_struct + n_slack

    art_of_row = {}
    if art_rows:
        art = np.zeros((m, len(art_rows)))
        for k, i in enumerate(art_rows):
            art[i, k] = 1.0
            art_of_row[i] = n_real + k
        A = np.hstack([A, art])
    n_total = A.shape[1]

    basis = [0] * m
    for i, r in enumerate(rel):
        if r == "<=":
            k = next(kk for (ri, kk) in slack_cols if ri == i)
            basis[i] = n_struct + k
        else:
            basis[i] = art_of_row[i]

    tab = _Tableau(A, b, np.zeros(n_total), basis, n_real,
                   refactor_every=refactor_every)

    if art_rows:
        c1 = np.zeros(n_total)
        c1[n_real:] = -1.0
        tab.c = c1
        status = tab.run(allowed=range(n_total))
        if tab.objective_value() < -1e-7 * (1 + abs(b).max()):
            return LpSolution(status=LpStatus.INFEASIBLE)
        # evict surviving artificials onto nonbasic real columns
        basic = set(tab.basis)
        for pos in range(m):
            if tab.basis[pos] >= n_real:
                row = tab.Binv[pos] @ A[:, :n_real]
                for j in np.nonzero(np.abs(row) > _PIVOT_TOL)[0]:
                    if int(j) not in basic:
                        tab._pivot(int(j), pos)
                        basic = set(tab.basis)
                        break

    c2 = np.zeros(n_total)
    c2[:len(cobj)] = cobj
    tab.c = c2
    status = tab.run(allowed=range(n_real))
    if status == "unbounded":
        return LpSolution(status=LpStatus.UNBOUNDED)

    z = np.zeros(n_total)
    z[tab.basis] = tab.xb
    x = np.empty(lp.n)
    for j, spec in enumerate(col_map):
        if spec[0] == "shift":
            x[j] = z[spec[1]] + spec[2]
        elif spec[0] == "mirror":
            x[j] = spec[2] - z[spec[1]]
        else:
            x[j] = z[spec[1]] - z[spec[2]]
    obj = tab.objective_value() + shift_obj

    y_std = tab.duals()
    duals = y_std[:lp.m] * row_sign[:lp.m]

    ax = lp.rows @ x
    viol = np.zeros(lp.m)
    for i, r in enumerate(lp.relations):
        if r == "<=":
            viol[i] = max(0.0, ax[i] - lp.rhs[i])
        elif r == ">=":
            viol[i] = max(0.0, lp.rhs[i] - ax[i])
        else:
            viol[i] = abs(ax[i] - lp.rhs[i])
    bound_viol = np.maximum(np.maximum(lp.lb - x, x - lp.ub), 0.0)
    bound_viol = bound_viol[np.isfinite(bound_viol)]
    primal_resid = float(max(viol.max(initial=0.0),
                             bound_viol.max(initial=0.0)))

    rc = tab.c - y_std @ A
    comp = float(max(np.abs(rc[tab.basis]).max(initial=0.0),
                     np.abs(duals * (ax - lp.rhs)).max(initial=0.0)))
    gap = float(abs(tab.objective_value() - y_std @ b))

    return LpSolution(
        status=LpStatus.OPTIMAL, x=x, duals=duals, objective=obj,
        residuals={"primal": primal_resid, "comp_slack": comp, "gap": gap},
    )
