"""Dense bounded-variable primal simplex.

Problems are posed as::

    minimize    c @ x
    subject to  lo_i <= A_i @ x <= hi_i      (row i; either side may be infinite)
                lb_j <= x_j <= ub_j

``LinearProgram.from_senses`` builds that form from the usual (A, senses, b)
triple. Every row gets a bounded slack ``s_i = -A_i @ x`` so that the initial
basis is the slack basis wherever the starting point already satisfies the
row; artificials are added only for the remaining rows (phase 1).

Pricing is Dantzig's largest reduced cost; after a run of degenerate pivots
the solver switches to Bland's smallest-index rule until progress resumes,
which rules out cycling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERICAL_FAILURE = "numerical_failure"

SENSES = ("<=", ">=", "=")


@dataclass
class LinearProgram:
    c: np.ndarray
    A: np.ndarray
    row_lo: np.ndarray
    row_hi: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    names: Optional[list] = None
    row_names: Optional[list] = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        n = self.c.size
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
        m = self.A.shape[0]
        self.row_lo = np.broadcast_to(np.asarray(self.row_lo, dtype=float), (m,)).copy()
        self.row_hi = np.broadcast_to(np.asarray(self.row_hi, dtype=float), (m,)).copy()
        self.lb = np.broadcast_to(np.asarray(self.lb, dtype=float), (n,)).copy()
        self.ub = np.broadcast_to(np.asarray(self.ub, dtype=float), (n,)).copy()
        for name, arr in (("c", self.c), ("A", self.A)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
        if np.any(np.isnan(self.row_lo)) or np.any(np.isnan(self.row_hi)):
            raise ValueError("NaN row bound")

    @classmethod
    def from_senses(cls, c, A, senses, b, lb=0.0, ub=np.inf, **kw) -> "LinearProgram":
        b = np.asarray(b, dtype=float)
        senses = list(senses)
        if len(senses) != b.size:
            raise ValueError("one sense per row required")
        lo = np.full(b.size, -np.inf)
        hi = np.full(b.size, np.inf)
        for i, s in enumerate(senses):
            if s not in SENSES:
                raise ValueError(f"unknown row sense {s!r}")
            if s in ("<=", "="):
                hi[i] = b[i]
            if s in (">=", "="):
                lo[i] = b[i]
        return cls(c, A, lo, hi, lb, ub, **kw)

    @property
    def shape(self):
        return self.A.shape

    def residual(self, x) -> float:
        """Largest violation of row or variable bounds at ``x`` (inf-norm)."""
        ax = self.A @ x
        v = [0.0]
        if ax.size:
            v += [np.max(self.row_lo - ax), np.max(ax - self.row_hi)]
        if x.size:
            v += [np.max(self.lb - x), np.max(x - self.ub)]
        return float(max(v))

    def objective(self, x) -> float:
        return float(self.c @ x)


@dataclass
class LPResult:
    status: str
    x: Optional[np.ndarray] = None
    objective: Optional[float] = None
    duals: Optional[np.ndarray] = None
    iterations: int = 0
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


class _Tableau:
    """Working state of one simplex run over the slack-extended problem."""

    def __init__(self, lp: LinearProgram, tol: float):
        m, n = lp.shape
        self.m, self.n = m, n
        self.tol = tol
        # columns: x (n) | slacks (m) | artificials (added below)
        lo = np.concatenate([lp.lb, -lp.row_hi])
        hi = np.concatenate([lp.ub, -lp.row_lo])
        x = np.where(np.isfinite(lo), lo, np.where(np.isfinite(hi), hi, 0.0))
        x[n:] = 0.0
        ax = lp.A @ x[:n] if m else np.zeros(0)
        # row i: A_i x + s_i = 0, so the slack wants s_i = -A_i x
        s_need = -ax
        slack_ok = (s_need >= lo[n:] - tol) & (s_need <= hi[n:] + tol)
        x[n:] = np.clip(s_need, lo[n:], hi[n:])
        art_rows = np.flatnonzero(~slack_ok)
        k = art_rows.size
        resid = -(ax + x[n:])  # what the artificial must absorb: A x + s + sign*a = 0
        sign = np.where(resid[art_rows] >= 0, 1.0, -1.0)
        self.N = n + m + k
        self.n_art = k
        T = np.zeros((m, self.N))
        T[:, :n] = lp.A
        T[:, n:n + m] = np.eye(m)
        basis = np.arange(n, n + m)
        if k:
            T[art_rows, n + m + np.arange(k)] = sign
            basis[art_rows] = n + m + np.arange(k)
            # express the tableau in terms of the current basis: scale artificial rows
            T[art_rows] *= sign[:, None]
        self.T = T
        self.basis = basis
        self.lo = np.concatenate([lo, np.zeros(k)])
        self.hi = np.concatenate([hi, np.full(k, np.inf)])
        self.x = np.concatenate([x, np.abs(resid[art_rows])])
        self.A_full = np.zeros((m, self.N))
        self.A_full[:, :n] = lp.A
        self.A_full[:, n:n + m] = np.eye(m)
        if k:
            self.A_full[art_rows, n + m + np.arange(k)] = sign
        self.is_basic = np.zeros(self.N, dtype=bool)
        self.is_basic[basis] = True

    def reduced_costs(self, cost):
        return cost - cost[self.basis] @ self.T

    def pivot(self, r, q):
        T = self.T
        prow = T[r] / T[r, q]
        col = T[:, q].copy()
        col[r] = 0.0
        T -= np.outer(col, prow)
        T[r] = prow
        self.is_basic[self.basis[r]] = False
        self.basis[r] = q
        self.is_basic[q] = True

    def refresh(self):
        """Recompute the tableau and basic values from the original columns."""
        B = self.A_full[:, self.basis]
        nb = ~self.is_basic
        rhs = -self.A_full[:, nb] @ self.x[nb]
        try:
            self.T = np.linalg.solve(B, self.A_full)
            self.x[self.basis] = np.linalg.solve(B, rhs)
        except np.linalg.LinAlgError:
            return False
        return True


def _run(tab: _Tableau, cost, allowed, max_iter, it0=0, degenerate_switch=50):
    """Primal simplex iterations; returns (status, iterations)."""
    tol = tab.tol
    d = tab.reduced_costs(cost)
    bland = degenerate_switch <= 0
    degenerate_run = 0
    it = it0
    since_refresh = 0
    while True:
        if it - it0 >= max_iter:
            return NUMERICAL_FAILURE, it
        x, lo, hi = tab.x, tab.lo, tab.hi
        nb = allowed & ~tab.is_basic
        at_lo = x <= lo + tol
        at_hi = x >= hi - tol
        can_up = nb & (d < -tol) & ~at_hi
        can_down = nb & (d > tol) & ~at_lo
        eligible = can_up | can_down
        if not eligible.any():
            return OPTIMAL, it
        if bland:
            q = int(np.flatnonzero(eligible)[0])
        else:
            score = np.where(eligible, np.abs(d), -1.0)
            q = int(np.argmax(score))
        direction = 1.0 if can_up[q] else -1.0
        alpha = tab.T[:, q]
        # basic i moves by -direction * theta * alpha_i
        move = -direction * alpha
        theta = np.inf
        r = -1
        if tab.m:
            xb = x[tab.basis]
            lob, hib = lo[tab.basis], hi[tab.basis]
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.full(tab.m, np.inf)
                dec = move < -1e-9
                inc = move > 1e-9
                ratio[dec] = (xb[dec] - lob[dec]) / -move[dec]
                ratio[inc] = (hib[inc] - xb[inc]) / move[inc]
            ratio = np.maximum(ratio, 0.0)
            theta = ratio.min()
            if np.isfinite(theta):
                ties = np.flatnonzero(ratio <= theta + 1e-12)
                if bland:
                    r = int(ties[np.argmin(tab.basis[ties])])
                else:
                    r = int(ties[np.argmax(np.abs(alpha[ties]))])
                theta = ratio[r]
        span = hi[q] - lo[q]
        if span < theta:
            # bound flip: entering variable crosses to its other bound
            theta = span
            r = -1
        if not np.isfinite(theta):
            return UNBOUNDED, it
        if tab.m:
            x[tab.basis] += move * theta
        x[q] += direction * theta
        if r >= 0:
            leaving = tab.basis[r]
            tab.pivot(r, q)
            # snap the leaving variable onto the bound it reached
            x[leaving] = lo[leaving] if abs(x[leaving] - lo[leaving]) <= abs(x[leaving] - hi[leaving]) else hi[leaving]
            d = d - d[q] * tab.T[r]
            since_refresh += 1
        if theta <= tol:
            degenerate_run += 1
            if degenerate_run >= degenerate_switch:
                bland = True
        elif degenerate_switch > 0:
            degenerate_run = 0
            bland = False
        it += 1
        if since_refresh >= 100:
            if not tab.refresh():
                return NUMERICAL_FAILURE, it
            d = tab.reduced_costs(cost)
            since_refresh = 0


def solve(lp: LinearProgram, tol: float = 1e-9, max_iter: Optional[int] = None,
          bland_after: int = 50) -> LPResult:
    """Two-phase bounded simplex.

    ``bland_after`` is the number of consecutive degenerate pivots tolerated
    under largest-coefficient pricing before switching to Bland's rule
    (0 means Bland's rule throughout). ``max_iter`` caps the pivots per
    phase; hitting it returns the numerical-failure status.
    """
    m, n = lp.shape
    if np.any(lp.lb > lp.ub + tol) or np.any(lp.row_lo > lp.row_hi + tol):
        return LPResult(INFEASIBLE, message="contradictory bounds")
    max_iter = max_iter or 50 * (m + n + 10)
    tab = _Tableau(lp, tol)
    N = tab.N
    allowed = np.ones(N, dtype=bool)
    it = 0
    if tab.n_art:
        c1 = np.zeros(N)
        c1[n + m:] = 1.0
        status, it = _run(tab, c1, allowed, max_iter, 0, bland_after)
        if status == NUMERICAL_FAILURE:
            return LPResult(status, iterations=it, message="iteration limit in phase 1")
        tab.refresh()
        infeas = float(tab.x[n + m:].sum())
        if infeas > 1e-7 * max(1.0, np.abs(lp.row_lo[np.isfinite(lp.row_lo)]).max(initial=1.0)):
            return LPResult(INFEASIBLE, iterations=it, message=f"phase 1 residual {infeas:.3g}")
        # fix artificials at zero and push basic ones out where possible
        tab.hi[n + m:] = 0.0
        tab.x[n + m:] = 0.0
        for r in range(m):
            if tab.basis[r] >= n + m:
                row = np.abs(tab.T[r, :n + m])
                row[tab.is_basic[:n + m]] = 0.0
                q = int(np.argmax(row))
                if row[q] > 1e-7:
                    tab.pivot(r, q)
        tab.refresh()
        allowed[n + m:] = False
    c2 = np.zeros(N)
    c2[:n] = lp.c
    status, it = _run(tab, c2, allowed, max_iter, it, bland_after)
    if status != OPTIMAL:
        msg = "iteration limit" if status == NUMERICAL_FAILURE else ""
        return LPResult(status, iterations=it, message=msg)
    tab.refresh()
    x = np.clip(tab.x[:n], lp.lb, lp.ub)
    B = tab.A_full[:, tab.basis]
    try:
        y = np.linalg.solve(B.T, c2[tab.basis]) if m else np.zeros(0)
    except np.linalg.LinAlgError:
        y = None
    return LPResult(OPTIMAL, x, lp.objective(x), y, it)


def dual_bound(lp: LinearProgram, y, tol: float = 1e-9) -> float:
    """Lagrangian lower bound ``min_x c@x - y@(A x - r)`` over the variable box.

    ``y_i >= 0`` prices the lower side of row i and ``y_i <= 0`` the upper
    side. Returns ``-inf`` when the box minimization is unbounded. Entries
    below ``tol`` in magnitude are treated as zero.
    """
    y = np.asarray(y, dtype=float)
    y = np.where(np.abs(y) <= tol, 0.0, y)
    d = lp.c - lp.A.T @ y
    d = np.where(np.abs(d) <= tol, 0.0, d)
    val = 0.0
    for i, yi in enumerate(y):
        if yi > 0:
            val += yi * lp.row_lo[i]
        elif yi < 0:
            val += yi * lp.row_hi[i]
    for j, dj in enumerate(d):
        if dj > 0:
            val += dj * lp.lb[j]
        elif dj < 0:
            val += dj * lp.ub[j]
    return float(val) if np.isfinite(val) else -np.inf


def dump(lp: LinearProgram) -> str:
    """Human-readable listing of an LP.

    Grammar::

        minimize
          obj: <coef> <var> [+|- <coef> <var>]...
        subject to
          <row>: [<lo> <=] <expr> [<= <hi>]
        bounds
          <lb> <= <var> <= <ub>
    """
    names = lp.names or [f"x{j}" for j in range(lp.c.size)]
    rnames = lp.row_names or [f"r{i}" for i in range(lp.shape[0])]

    def expr(coefs):
        terms = [f"{'-' if v < 0 else '+'} {abs(v):.12g} {names[j]}" for j, v in enumerate(coefs) if v != 0]
        if not terms:
            return "0"
        s = " ".join(terms)
        return s[2:] if s.startswith("+ ") else s

    lines = ["minimize", f"  obj: {expr(lp.c)}", "subject to"]
    for i in range(lp.shape[0]):
        lo, hi = lp.row_lo[i], lp.row_hi[i]
        left = f"{lo:.12g} <= " if np.isfinite(lo) else ""
        right = f" <= {hi:.12g}" if np.isfinite(hi) else ""
        if lo == hi:
            left, right = "", f" = {hi:.12g}"
        lines.append(f"  {rnames[i]}: {left}{expr(lp.A[i])}{right}")
    lines.append("bounds")
    for j in range(lp.c.size):
        lines.append(f"  {lp.lb[j]:.12g} <= {names[j]} <= {lp.ub[j]:.12g}")
    return "\n".join(lines) + "\n"


# -- brute-force reference (small problems only) --------------------------------

def enumerate_vertices(lp: LinearProgram, tol: float = 1e-9):
    """Optimal value by enumerating every vertex of the feasible polytope.

    Each candidate picks n active constraints among rows (either side) and
    variable bounds, solves the square system and keeps feasible points.
    Exponential; meant as an independent oracle for tiny LPs. Returns
    ``(value, x)`` or ``(None, None)`` when no vertex is feasible.
    """
    from itertools import combinations

    m, n = lp.shape
    planes = []
    for i in range(m):
        for side in (lp.row_lo[i], lp.row_hi[i]):
            if np.isfinite(side):
                planes.append((lp.A[i], side))
    eye = np.eye(n)
    for j in range(n):
        for side in (lp.lb[j], lp.ub[j]):
            if np.isfinite(side):
                planes.append((eye[j], side))
    best, best_x = None, None
    for combo in combinations(range(len(planes)), n):
        M = np.array([planes[k][0] for k in combo])
        if abs(np.linalg.det(M)) < 1e-10:
            continue
        rhs = np.array([planes[k][1] for k in combo])
        x = np.linalg.solve(M, rhs)
        if lp.residual(x) <= 1e-7:
            v = lp.objective(x)
            if best is None or v < best - tol:
                best, best_x = v, x
    return best, best_x
