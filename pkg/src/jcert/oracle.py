"""Exact verification of tiny networks: branch-and-bound over ReLU states.

Every query reduces to maximizing a linear attack objective over the
perturbation set with exact ReLU semantics.  Unstable units get the triangle
relaxation; branching fixes one unit active or inactive, and a leaf (all
unstable units fixed) makes the network linear on its region, so the leaf LP
value is exact.  Pruning keeps the search sound and complete:

* decide mode   -- prune subtrees whose relaxation stays below the attack
                   threshold; any feasible point reaching it is a witness.
* optimize mode -- prune subtrees that cannot beat the incumbent; the result
                   is the exact optimum over the whole feasible set.

Candidate witnesses are always re-simulated through ``netcore.forward`` on
the original (unlinearized) models, so a reported witness never rests on LP
arithmetic alone.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from .bounds import LINF, L1, ActivationBounds, PerturbationSpec, interval_bounds_from_box
from .netcore import Network, forward, linearize
from .simplex import LinearProgram, simplex_solve

DEFAULT_CAP = 24
DEFAULT_TIMEOUT = 240.0
# LPs cannot express strict inequalities; argmax constraints demand at least
# this margin.  Far below every certification tolerance in use.
ARGMAX_SLACK = 1e-9


class OracleCapError(ValueError):
    """The query exceeds the ReLU-unit cap for complete search."""


@dataclass(frozen=True)
class OracleResult:
    """Outcome of one complete-search query.

    ``bound`` is a proven upper bound on the attack objective (for robust
    results it is negative: the margin by which the query failed).  For
    optimize-mode queries ``value`` carries the exact optimum.  A vulnerable
    result always ships the witness plus its re-simulated objective value.
    """

    status: str  # "robust" | "vulnerable" | "timeout" | "exact"
    witness: np.ndarray | None = None
    witness_value: float | None = None
    bound: float | None = None
    value: float | None = None
    nodes: int = 0
    elapsed_ms: float = 0.0
    node_trace: tuple[tuple[float, float], ...] = ()

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "witness": None if self.witness is None else [float(v) for v in self.witness],
            "witness_value": self.witness_value,
            "bound": self.bound,
            "value": self.value,
            "nodes": self.nodes,
            "elapsed_ms": self.elapsed_ms,
        }


@dataclass(frozen=True)
class MinimalPerturbationResult:
    """Smallest adversarial radius found by bisection.

    ``kind`` is "exact" when the bisection bracketed the boundary to
    tolerance, "lower_bound" when the search ran out of time or domain and
    only proved safety up to ``radius``.
    """

    radius: float
    kind: str
    verify_calls: int = 0

    def to_dict(self) -> dict:
        return {"radius": self.radius, "kind": self.kind, "verify_calls": self.verify_calls}


class _Deadline:
    def __init__(self, seconds: float):
        self.expiry = time.monotonic() + seconds

    def expired(self) -> bool:
        return time.monotonic() >= self.expiry

    def remaining(self) -> float:
        return max(0.0, self.expiry - time.monotonic())


class _Encoding:
    """LP variable layout and row builder for stacked dense networks.

    Variables: input x (shared), optional L1 deviation variables, one
    post-ReLU variable per hidden unit of every network, then any extra
    query variables appended by the caller.
    """

    def __init__(self, models: list[Network], x, spec: PerturbationSpec, extra_vars: int = 0):
        self.models = [linearize(m) for m in models]
        self.x0 = np.asarray(x, dtype=np.float64).reshape(-1)
        self.spec = spec
        self.dim = self.models[0].input_size
        for m in self.models:
            if m.input_size != self.dim:
                raise ValueError("stacked models must share the input size")
        low, high = spec.input_box(self.x0)
        self.box_low, self.box_high = low, high
        self.bounds: list[ActivationBounds] = [
            interval_bounds_from_box(m, low, high) for m in self.models
        ]
        self.l1 = spec.norm == L1

        lowers = [low]
        uppers = [high]
        offset = self.dim
        if self.l1:
            self.l1_offset = self.dim
            lowers.append(np.zeros(self.dim))
            uppers.append(np.full(self.dim, spec.epsilon))
            offset = 2 * self.dim
        self.act_offset: dict[tuple[int, int], int] = {}
        for mi, m in enumerate(self.models):
            hidden = m.linear_layers[:-1]
            for li, layer in enumerate(hidden):
                self.act_offset[(mi, li)] = offset
                post_lo = np.maximum(self.bounds[mi].pre_low[li], 0.0)
                post_hi = np.maximum(self.bounds[mi].pre_high[li], 0.0)
                lowers.append(post_lo)
                uppers.append(post_hi)
                offset += layer.out_dim
        self.extra_offset = offset
        if extra_vars:
            lowers.append(np.zeros(extra_vars))  # caller overwrites
            uppers.append(np.zeros(extra_vars))
        self.num_vars = offset + extra_vars
        self.lower = np.concatenate(lowers)
        self.upper = np.concatenate(uppers)

        # Branchable units: globally unstable, wide enough to relax.
        self.unstable: list[tuple[int, int, int]] = []
        self.width: dict[tuple[int, int, int], float] = {}
        for mi, m in enumerate(self.models):
            for li in range(len(m.linear_layers) - 1):
                l = self.bounds[mi].pre_low[li]
                u = self.bounds[mi].pre_high[li]
                for k in np.nonzero((l < 0.0) & (u > 0.0))[0]:
                    unit = (mi, li, int(k))
                    self.width[unit] = float(u[k] - l[k])
                    if u[k] - l[k] > 1e-9:
                        self.unstable.append(unit)

    def total_relu_units(self) -> int:
        return sum(sum(l.out_dim for l in m.linear_layers[:-1]) for m in self.models)

    def prev_slice(self, mi: int, li: int) -> tuple[int, int]:
        """Variable range feeding linear layer li of model mi."""
        if li == 0:
            return 0, self.dim
        off = self.act_offset[(mi, li - 1)]
        return off, off + self.models[mi].linear_layers[li - 1].out_dim

    def logit_row(self, mi: int, c: int, scale: float = 1.0):
        """(vector, const) with vector . vars + const == scale * z_c of model mi."""
        m = self.models[mi]
        final = m.linear_layers[-1]
        vec = np.zeros(self.num_vars)
        s, e = self.prev_slice(mi, len(m.linear_layers) - 1)
        vec[s:e] = scale * final.weights[c]
        return vec, scale * float(final.bias[c])

    def relu_rows(self, assignment: dict[tuple[int, int, int], bool]):
        """Inequality rows encoding every hidden unit under the assignment."""
        rows, rhs = [], []

        def add(vec, b):
            rows.append(vec)
            rhs.append(b)

        for mi, m in enumerate(self.models):
            hidden = m.linear_layers[:-1]
            for li, layer in enumerate(hidden):
                ps, pe = self.prev_slice(mi, li)
                aoff = self.act_offset[(mi, li)]
                l_pre = self.bounds[mi].pre_low[li]
                u_pre = self.bounds[mi].pre_high[li]
                for k in range(layer.out_dim):
                    w = layer.weights[k]
                    b = float(layer.bias[k])
                    l, u = float(l_pre[k]), float(u_pre[k])
                    a = aoff + k
                    if u <= 0.0:
                        continue  # a is boxed to [0, 0]
                    if l >= 0.0:
                        # a == w . prev + b
                        vec = np.zeros(self.num_vars)
                        vec[ps:pe] = -w
                        vec[a] = 1.0
                        add(vec, b)
                        add(-vec, -b)
                        continue
                    state = assignment.get((mi, li, k))
                    if state is True:  # forced active: a == z, z >= 0
                        vec = np.zeros(self.num_vars)
                        vec[ps:pe] = -w
                        vec[a] = 1.0
                        add(vec, b)
                        add(-vec, -b)
                        vec = np.zeros(self.num_vars)
                        vec[ps:pe] = -w
                        add(vec, b)
                    elif state is False:  # forced inactive: a <= 0, z <= 0
                        vec = np.zeros(self.num_vars)
                        vec[a] = 1.0
                        add(vec, 0.0)
                        vec = np.zeros(self.num_vars)
                        vec[ps:pe] = w
                        add(vec, -b)
                    else:
                        if u - l <= 1e-9:
                            continue  # box [0, u] is all we claim
                        # Triangle: a >= z and a <= u (z - l) / (u - l).
                        vec = np.zeros(self.num_vars)
                        vec[ps:pe] = w
                        vec[a] = -1.0
                        add(vec, -b)
                        s = u / (u - l)
                        vec = np.zeros(self.num_vars)
                        vec[ps:pe] = -s * w
                        vec[a] = 1.0
                        add(vec, s * (b - l))
        if self.l1:
            off = self.l1_offset
            for k in range(self.dim):
                vec = np.zeros(self.num_vars)
                vec[k] = 1.0
                vec[off + k] = -1.0
                add(vec, float(self.x0[k]))
                vec = np.zeros(self.num_vars)
                vec[k] = -1.0
                vec[off + k] = -1.0
                add(vec, -float(self.x0[k]))
            vec = np.zeros(self.num_vars)
            vec[off : off + self.dim] = 1.0
            add(vec, float(self.spec.epsilon))
        return rows, rhs


@dataclass
class _Query:
    """One branch-and-bound problem: maximize objective . vars + const."""

    encoding: _Encoding
    objective: np.ndarray
    obj_const: float
    extra_rows: list
    extra_rhs: list
    # true_value(x) re-simulates the attack objective on the original models.
    true_value: callable

    def solve_node(self, assignment):
        rows, rhs = self.encoding.relu_rows(assignment)
        rows.extend(self.extra_rows)
        rhs.extend(self.extra_rhs)
        A = np.array(rows) if rows else np.zeros((0, self.encoding.num_vars))
        lp = LinearProgram(-self.objective, A, np.array(rhs, dtype=np.float64),
                           self.encoding.lower, self.encoding.upper)
        res = simplex_solve(lp)
        if res.status != "optimal":
            return None
        return -res.value + self.obj_const, res.x


def _branch_and_bound(query: _Query, *, mode: str, threshold: float,
                      deadline: _Deadline, trace: bool = False) -> OracleResult:
    enc = query.encoding
    start = time.monotonic()
    nodes = 0
    trace_rows: list[tuple[float, float]] = []

    def elapsed():
        return (time.monotonic() - start) * 1000.0

    root = query.solve_node({})
    nodes += 1
    if root is None:
        if mode == "optimize":
            return OracleResult("exact", value=-np.inf, nodes=nodes, elapsed_ms=elapsed())
        return OracleResult("robust", bound=-np.inf, nodes=nodes, elapsed_ms=elapsed())

    # Stack holds solved nodes: (relax value, assignment, lp point).
    stack = [(root[0], {}, root[1])]
    pruned_max = -np.inf
    best_val = -np.inf
    best_x = None

    while stack:
        if deadline.expired():
            ub = max([v for v, _, _ in stack] + [pruned_max, best_val])
            return OracleResult("timeout", bound=float(ub), value=_opt(best_val, mode),
                               witness=best_x if mode == "optimize" else None,
                               nodes=nodes, elapsed_ms=elapsed(), node_trace=tuple(trace_rows))
        val, assignment, point = stack.pop()
        if mode == "decide" and val < threshold:
            pruned_max = max(pruned_max, val)
            continue
        if mode == "optimize" and val <= best_val:
            continue
        x_cand = point[: enc.dim]
        true_val = query.true_value(x_cand)
        if mode == "decide" and true_val >= threshold:
            return OracleResult("vulnerable", witness=x_cand.copy(), witness_value=float(true_val),
                               bound=float(val), nodes=nodes, elapsed_ms=elapsed(),
                               node_trace=tuple(trace_rows))
        if mode == "optimize" and true_val > best_val:
            best_val, best_x = float(true_val), x_cand.copy()
        free = [u for u in enc.unstable if u not in assignment]
        if not free:
            if mode == "decide":
                # Exact region optimum clears the threshold; the LP point is
                # the witness even if float re-simulation sits on the fence.
                return OracleResult("vulnerable", witness=x_cand.copy(),
                                   witness_value=float(true_val), bound=float(val),
                                   nodes=nodes, elapsed_ms=elapsed(), node_trace=tuple(trace_rows))
            if val > best_val:
                best_val, best_x = float(val), x_cand.copy()
            continue
        unit = max(free, key=lambda u: (enc.width[u], (-u[0], -u[1], -u[2])))
        children = []
        for state in (True, False):
            child_asg = dict(assignment)
            child_asg[unit] = state
            solved = query.solve_node(child_asg)
            nodes += 1
            if solved is None:
                continue
            if trace:
                trace_rows.append((float(val), float(solved[0])))
            children.append((solved[0], child_asg, solved[1]))
        children.sort(key=lambda c: c[0])  # larger bound explored first
        stack.extend(children)

    if mode == "optimize":
        return OracleResult("exact", value=float(best_val), witness=best_x,
                           witness_value=float(best_val) if best_x is not None else None,
                           nodes=nodes, elapsed_ms=elapsed(), node_trace=tuple(trace_rows))
    return OracleResult("robust", bound=float(pruned_max), nodes=nodes,
                       elapsed_ms=elapsed(), node_trace=tuple(trace_rows))


def _opt(best_val, mode):
    return float(best_val) if mode == "optimize" and np.isfinite(best_val) else None


def _check_cap(enc: _Encoding, cap: int):
    total = enc.total_relu_units()
    if total > cap:
        raise OracleCapError(
            f"query has {total} ReLU units, above the complete-search cap of {cap}"
        )


def _margin_query(net: Network, x, t: int, u: int, spec: PerturbationSpec) -> _Query:
    if t == u:
        raise ValueError("attack target must differ from the true class")
    enc = _Encoding([net], x, spec)
    vec_u, const_u = enc.logit_row(0, u)
    vec_t, const_t = enc.logit_row(0, t)
    original = net

    def true_value(x_cand):
        z = forward(original, x_cand)
        return float(z[u] - z[t])

    return _Query(enc, vec_u - vec_t, const_u - const_t, [], [], true_value)


def exact_verify(net: Network, x, t: int, u: int, spec: PerturbationSpec, *,
                 cap: int = DEFAULT_CAP, timeout: float = DEFAULT_TIMEOUT,
                 trace: bool = False) -> OracleResult:
    """Decide exactly whether some feasible point reaches z_u >= z_t.

    Robust means no feasible point attains the target; vulnerable ships a
    witness.  Refuses networks above the ReLU-unit cap.
    """
    query = _margin_query(net, x, t, u, spec)
    _check_cap(query.encoding, cap)
    return _branch_and_bound(query, mode="decide", threshold=0.0,
                             deadline=_Deadline(timeout), trace=trace)


def exact_margin_min(net: Network, x, t: int, u: int, spec: PerturbationSpec, *,
                     cap: int = DEFAULT_CAP, timeout: float = DEFAULT_TIMEOUT) -> OracleResult:
    """Exact minimum of the margin z_t - z_u over the feasible set.

    Returns an "exact" result whose ``value`` is the minimum; the witness
    attains it.  This is the reference the fast bounds are compared against.
    """
    query = _margin_query(net, x, t, u, spec)
    _check_cap(query.encoding, cap)
    res = _branch_and_bound(query, mode="optimize", threshold=0.0,
                            deadline=_Deadline(timeout))
    if res.status == "exact":
        value = None if res.value is None else -res.value
        margin = None if res.witness_value is None else -res.witness_value
        return OracleResult("exact", witness=res.witness, witness_value=margin,
                           value=value, nodes=res.nodes, elapsed_ms=res.elapsed_ms)
    # Timeout: res.bound upper-bounds the attack max, so -bound is the best
    # verified lower bound on the margin minimum.
    return OracleResult("timeout", bound=None if res.bound is None else -res.bound,
                       value=None if res.value is None else -res.value,
                       nodes=res.nodes, elapsed_ms=res.elapsed_ms)


def _unanimous_query(models: list[Network], x, t: int, j: int, spec: PerturbationSpec) -> _Query:
    if j == t:
        raise ValueError("unanimous target must differ from the true class")
    num_classes = models[0].num_classes
    for m in models:
        if m.num_classes != num_classes:
            raise ValueError("stacked models must share the class count")
    enc = _Encoding(models, x, spec, extra_vars=1)
    sigma = enc.extra_offset
    # sigma's box comes from the interval logit bounds.
    lo, hi = np.inf, -np.inf
    rows, rhs = [], []
    for mi in range(len(models)):
        zl = enc.bounds[mi].logit_low
        zh = enc.bounds[mi].logit_high
        for c in range(num_classes):
            if c == j:
                continue
            lo = min(lo, float(zl[j] - zh[c]))
            hi = max(hi, float(zh[j] - zl[c]))
            vec_c, const_c = enc.logit_row(mi, c)
            vec_j, const_j = enc.logit_row(mi, j)
            # z_c - z_j + sigma <= 0
            vec = vec_c - vec_j
            vec[sigma] = 1.0
            rows.append(vec)
            rhs.append(const_j - const_c)
    enc.lower[sigma] = min(lo, 0.0) - 1.0
    enc.upper[sigma] = max(hi, 0.0) + 1.0
    objective = np.zeros(enc.num_vars)
    objective[sigma] = 1.0
    originals = list(models)

    def true_value(x_cand):
        worst = np.inf
        for m in originals:
            z = forward(m, x_cand)
            others = np.delete(z, j)
            worst = min(worst, float(z[j] - others.max()))
        return worst

    return _Query(enc, objective, 0.0, rows, rhs, true_value)


def exact_unanimous_adversary(models: list[Network], x, t: int, j: int,
                              spec: PerturbationSpec, *, cap: int = DEFAULT_CAP,
                              timeout: float = DEFAULT_TIMEOUT,
                              trace: bool = False) -> OracleResult:
    """Decide whether one feasible point makes every model's argmax equal j.

    Argmax strictness is encoded with a 1e-9 slack on the >= constraints.
    """
    query = _unanimous_query(list(models), x, t, j, spec)
    _check_cap(query.encoding, cap)
    return _branch_and_bound(query, mode="decide", threshold=ARGMAX_SLACK,
                             deadline=_Deadline(timeout), trace=trace)


def exact_majority_adversary(models: list[Network], x, t: int, j: int,
                             spec: PerturbationSpec, *, cap: int = DEFAULT_CAP,
                             timeout: float = DEFAULT_TIMEOUT) -> OracleResult:
    """Decide whether floor(n/2)+1 models can be steered to argmax j at once.

    Enumerates the minimal agreeing subsets and runs the stacked query per
    subset; vulnerable as soon as any subset admits a witness.
    """
    models = list(models)
    need = len(models) // 2 + 1
    deadline = _Deadline(timeout)
    nodes = 0
    elapsed = 0.0
    best_bound = -np.inf
    for subset in itertools.combinations(range(len(models)), need):
        chosen = [models[i] for i in subset]
        query = _unanimous_query(chosen, x, t, j, spec)
        _check_cap(query.encoding, cap)
        res = _branch_and_bound(query, mode="decide", threshold=ARGMAX_SLACK,
                                deadline=deadline)
        nodes += res.nodes
        elapsed += res.elapsed_ms
        if res.status == "vulnerable":
            return OracleResult("vulnerable", witness=res.witness,
                               witness_value=res.witness_value, bound=res.bound,
                               nodes=nodes, elapsed_ms=elapsed)
        if res.status == "timeout":
            return OracleResult("timeout", bound=res.bound, nodes=nodes, elapsed_ms=elapsed)
        if res.bound is not None:
            best_bound = max(best_bound, res.bound)
    return OracleResult("robust", bound=float(best_bound), nodes=nodes, elapsed_ms=elapsed)


def _domain_reach(x, norm: str, domain_low, domain_high) -> float:
    x = np.asarray(x, float).reshape(-1)
    low = np.broadcast_to(np.asarray(domain_low, float), x.shape)
    high = np.broadcast_to(np.asarray(domain_high, float), x.shape)
    per_coord = np.maximum(x - low, high - x)
    return float(per_coord.max()) if norm == LINF else float(per_coord.sum())


def minimal_perturbation(net: Network, x, t: int, norm: str = LINF, *,
                         targets=None, tol: float = 1e-4, cap: int = DEFAULT_CAP,
                         timeout: float = DEFAULT_TIMEOUT, domain_low=0.0,
                         domain_high=1.0) -> MinimalPerturbationResult:
    """Bisection for the smallest radius admitting any adversarial example.

    Checks exact_verify against every target class (or the given subset) at
    each probe.  When the time budget runs out, or the whole domain is
    reachable without an adversarial example, the returned radius is only a
    proven-safe lower bound and is flagged as such.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if targets is None:
        targets = [u for u in range(net.num_classes) if u != t]
    targets = list(targets)
    deadline = _Deadline(timeout)
    calls = 0

    z = forward(net, x)
    if any(z[u] >= z[t] for u in targets):
        return MinimalPerturbationResult(0.0, "exact", 0)

    def vulnerable_at(eps: float):
        nonlocal calls
        spec = PerturbationSpec(norm, eps, domain_low, domain_high)
        for u in targets:
            if deadline.expired():
                return None
            calls += 1
            res = exact_verify(net, x, t, u, spec, cap=cap, timeout=deadline.remaining())
            if res.status == "vulnerable":
                return True
            if res.status == "timeout":
                return None
        return False

    eps_max = _domain_reach(x, norm, domain_low, domain_high)
    lo = 0.0
    hi = min(0.01, eps_max) if eps_max > 0 else 0.0
    while True:
        verdict = vulnerable_at(hi)
        if verdict is None:
            return MinimalPerturbationResult(lo, "lower_bound", calls)
        if verdict:
            break
        lo = hi
        if hi >= eps_max:
            return MinimalPerturbationResult(eps_max, "lower_bound", calls)
        hi = min(2 * hi, eps_max)
    while hi - lo > tol:
        mid = (lo + hi) / 2
        verdict = vulnerable_at(mid)
        if verdict is None:
            return MinimalPerturbationResult(lo, "lower_bound", calls)
        if verdict:
            hi = mid
        else:
            lo = mid
    return MinimalPerturbationResult((lo + hi) / 2, "exact", calls)
