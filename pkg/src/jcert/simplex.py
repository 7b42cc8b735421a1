"""Dense two-phase simplex for small box-bounded linear programs.

Problems have the form

    minimize    c . v
    subject to  A v <= b,   lower <= v <= upper   (all bounds finite)

which is every LP the verifier generates: finite boxes make the feasible set
compact, so the solve is either optimal at a vertex or infeasible, never
unbounded.  Pivoting is deterministic (Dantzig rule, lowest-index ties) and
falls back to Bland's rule when a run of degenerate pivots suggests cycling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_TOL = 1e-9
_FEAS_TOL = 1e-8
_DEGENERATE_RUN = 60


@dataclass(frozen=True)
class LinearProgram:
    """minimize objective . v  s.t.  constraints v <= rhs, lower <= v <= upper."""

    objective: np.ndarray
    constraints: np.ndarray
    rhs: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "objective", np.asarray(self.objective, dtype=np.float64))
        object.__setattr__(self, "constraints", np.atleast_2d(np.asarray(self.constraints, dtype=np.float64)))
        object.__setattr__(self, "rhs", np.asarray(self.rhs, dtype=np.float64))
        object.__setattr__(self, "lower", np.asarray(self.lower, dtype=np.float64))
        object.__setattr__(self, "upper", np.asarray(self.upper, dtype=np.float64))
        n = self.objective.shape[0]
        if self.constraints.size == 0:
            object.__setattr__(self, "constraints", np.zeros((0, n)))
            object.__setattr__(self, "rhs", np.zeros(0))
        if self.constraints.shape[1] != n:
            raise ValueError(
                f"constraint matrix has {self.constraints.shape[1]} columns for {n} variables"
            )
        if self.constraints.shape[0] != self.rhs.shape[0]:
            raise ValueError("constraint row count does not match rhs length")
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise ValueError("box bounds must match variable count")
        if not np.all(np.isfinite(self.lower)) or not np.all(np.isfinite(self.upper)):
            raise ValueError("box bounds must be finite")
        if np.any(self.lower > self.upper + _TOL):
            raise ValueError("lower bound exceeds upper bound")

    @property
    def num_vars(self) -> int:
        return self.objective.shape[0]


class Infeasible(Exception):
    """Raised by LPResult.require_optimal when the LP has no feasible point."""


@dataclass(frozen=True)
class LPResult:
    status: str  # "optimal" | "infeasible"
    value: float | None
    x: np.ndarray | None

    def require_optimal(self) -> "LPResult":
        if self.status != "optimal":
            raise Infeasible("linear program is infeasible")
        return self


def simplex_solve(lp: LinearProgram) -> LPResult:
    """Solve the LP; returns an optimal vertex solution or infeasible status."""
    n = lp.num_vars
    width = lp.upper - lp.lower
    # Shift to s = v - lower, 0 <= s <= width; upper bounds become rows.
    h1 = lp.rhs - lp.constraints @ lp.lower
    G = np.vstack([lp.constraints, np.eye(n)])
    h = np.concatenate([h1, width])
    m = G.shape[0]

    # Tableau columns: [s (n) | slack (m) | artificial (k) | rhs].
    neg = h < 0
    k = int(neg.sum())
    T = np.zeros((m, n + m + k + 1))
    T[:, :n] = G
    T[:, n : n + m] = np.eye(m)
    T[:, -1] = h
    T[neg] *= -1.0
    art_cols = []
    basis = np.empty(m, dtype=np.int64)
    ai = 0
    for i in range(m):
        if neg[i]:
            col = n + m + ai
            T[i, col] = 1.0
            basis[i] = col
            art_cols.append(col)
            ai += 1
        else:
            basis[i] = n + i
    art_cols = np.array(art_cols, dtype=np.int64)

    if k > 0:
        # Phase 1: minimize the artificial total, priced out over the basis.
        obj = np.zeros(n + m + k + 1)
        obj[art_cols] = 1.0
        for i in range(m):
            if basis[i] in art_cols:
                obj -= T[i]
        _pivot_to_optimal(T, obj, basis, banned=set())
        if -obj[-1] > 1e-7:
            return LPResult("infeasible", None, None)
        _drive_out_artificials(T, basis, art_cols, n + m)

    # Phase 2: original objective over the shifted variables.
    obj = np.zeros(n + m + k + 1)
    obj[:n] = lp.objective
    for i in range(m):
        if obj[basis[i]] != 0.0:
            obj -= obj[basis[i]] * T[i]
    _pivot_to_optimal(T, obj, basis, banned=set(art_cols.tolist()))

    s = np.zeros(n + m + k)
    s[basis] = T[:, -1]
    x = np.clip(lp.lower + s[:n], lp.lower, lp.upper)
    resid = lp.constraints @ x - lp.rhs if lp.constraints.size else np.zeros(0)
    if resid.size and resid.max() > _FEAS_TOL:
        raise ArithmeticError(
            f"simplex produced solution with feasibility residual {resid.max():.3e}"
        )
    return LPResult("optimal", float(lp.objective @ x), x)


def _pivot_to_optimal(T: np.ndarray, obj: np.ndarray, basis: np.ndarray, banned: set) -> None:
    m, total = T.shape[0], T.shape[1] - 1
    allowed = np.array([c not in banned for c in range(total)])
    bland = False
    degenerate_run = 0
    max_iter = 2000 + 200 * (m + total)
    for _ in range(max_iter):
        red = np.where(allowed, obj[:total], 0.0)
        candidates = np.nonzero(red < -_TOL)[0]
        if candidates.size == 0:
            return
        if bland:
            col = int(candidates[0])
        else:
            col = int(candidates[np.argmin(red[candidates])])
        ratios = np.full(m, np.inf)
        pos = T[:, col] > _TOL
        ratios[pos] = T[pos, -1] / T[pos, col]
        row = -1
        best = np.inf
        for i in range(m):
            if ratios[i] < best - _TOL or (ratios[i] < best + _TOL and row >= 0 and basis[i] < basis[row]):
                best = ratios[i]
                row = i
        if row < 0 or not np.isfinite(best):
            # Box bounds make true unboundedness impossible; only numerics land here.
            raise ArithmeticError("simplex found no leaving row (numerical breakdown)")
        if best < _TOL:
            degenerate_run += 1
            if degenerate_run >= _DEGENERATE_RUN:
                bland = True
        else:
            degenerate_run = 0
        _pivot(T, obj, basis, row, col)
    raise ArithmeticError("simplex iteration limit exceeded")


def _pivot(T: np.ndarray, obj: np.ndarray, basis: np.ndarray, row: int, col: int) -> None:
    T[row] /= T[row, col]
    coeffs = T[:, col].copy()
    coeffs[row] = 0.0
    T -= np.outer(coeffs, T[row])
    obj -= obj[col] * T[row]
    basis[row] = col


def _drive_out_artificials(T: np.ndarray, basis: np.ndarray, art_cols: np.ndarray, real: int) -> None:
    """Pivot artificial variables out of the basis where possible.

    A basic artificial stuck at zero with an all-zero row marks a redundant
    constraint; it stays basic at zero and its column never re-enters.
    """
    art = set(art_cols.tolist())
    for i in range(T.shape[0]):
        if basis[i] in art:
            cols = np.nonzero(np.abs(T[i, :real]) > _TOL)[0]
            if cols.size:
                _pivot(T, np.zeros(T.shape[1]), basis, i, int(cols[0]))
