"""Fast sound certification of a single network over an L-infinity ball.

Two bounding methods on logit margins z_t - z_u:

* ``ibp``  -- interval arithmetic layer by layer, with the margin taken
  through the final layer as a single linear map (tighter than subtracting
  the two logit intervals).
* ``dual`` -- one backward pass composing linear lower bounds through the
  ReLU layers; unstable units use the standard slope u/(u-l) relaxation and
  the input term is minimized exactly over the clipped input box.

Both methods only ever under-estimate the true minimum margin, so a
certificate implies robustness; the converse does not hold.  The exact
complete search lives in :mod:`jcert.oracle`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .netcore import Affine, Conv2D, Network, _conv_apply, linearize, predict

# Units with interval width below this are bounded by a constant instead of
# the slope relaxation, avoiding division by a vanishing u - l.
_WIDTH_EPS = 1e-9

LINF = "linf"
L1 = "l1"


@dataclass(frozen=True)
class PerturbationSpec:
    """Allowed perturbations: a norm ball intersected with a coordinate box."""

    norm: str
    epsilon: float
    domain_low: float | np.ndarray = 0.0
    domain_high: float | np.ndarray = 1.0

    def __post_init__(self):
        if self.norm not in (LINF, L1):
            raise ValueError(f"norm must be '{LINF}' or '{L1}', got {self.norm!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if np.any(np.asarray(self.domain_low) > np.asarray(self.domain_high)):
            raise ValueError("domain_low must be <= domain_high")

    def input_box(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-coordinate envelope of the feasible set around x.

        Exact for the L-inf ball; a sound superset for L1 (whose ball fits
        inside the same box).
        """
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        low = np.maximum(x - self.epsilon, self.domain_low)
        high = np.minimum(x + self.epsilon, self.domain_high)
        return low, high

    def contains(self, x: np.ndarray, x_adv: np.ndarray, tol: float = 1e-9) -> bool:
        x = np.asarray(x, float).reshape(-1)
        x_adv = np.asarray(x_adv, float).reshape(-1)
        if np.any(x_adv < np.asarray(self.domain_low) - tol):
            return False
        if np.any(x_adv > np.asarray(self.domain_high) + tol):
            return False
        delta = x_adv - x
        dist = np.max(np.abs(delta)) if self.norm == LINF else np.sum(np.abs(delta))
        return dist <= self.epsilon + tol


@dataclass(frozen=True)
class ActivationBounds:
    """Sound pre-activation intervals for each linear layer's output."""

    input_low: np.ndarray
    input_high: np.ndarray
    pre_low: tuple[np.ndarray, ...]
    pre_high: tuple[np.ndarray, ...]

    @property
    def logit_low(self) -> np.ndarray:
        return self.pre_low[-1]

    @property
    def logit_high(self) -> np.ndarray:
        return self.pre_high[-1]


@dataclass(frozen=True)
class MarginCertificate:
    """Lower bounds on z_t - z_u for every u != t, and the resulting verdict.

    ``margins[t]`` is NaN (the self-margin is undefined).  ``certified`` holds
    exactly when the input is correctly classified and every bound is
    strictly positive; argmax ties are treated as adversarial.
    """

    true_class: int
    margins: np.ndarray
    certified: bool
    method: str
    misclassified: bool = False
    input_index: int | None = None

    @property
    def min_margin(self) -> float:
        return float(np.nanmin(self.margins))

    def with_index(self, index: int) -> "MarginCertificate":
        return replace(self, input_index=index)


def _box_through_box(low, high, net: Network) -> ActivationBounds:
    pre_low, pre_high = [], []
    l, u = low, high
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Affine):
            c = (l.reshape(-1) + u.reshape(-1)) / 2
            r = (u.reshape(-1) - l.reshape(-1)) / 2
            zc = layer.weights @ c + layer.bias
            zr = np.abs(layer.weights) @ r
            l, u = zc - zr, zc + zr
            pre_low.append(l)
            pre_high.append(u)
        elif isinstance(layer, Conv2D):
            shape = net.layer_input_shape(i)
            c = ((l + u) / 2).reshape(shape)
            r = ((u - l) / 2).reshape(shape)
            abs_layer = Conv2D(np.abs(layer.kernel), np.zeros_like(layer.bias),
                               layer.stride, layer.padding)
            zc = _conv_apply(layer, c)
            zr = _conv_apply(abs_layer, r)
            l, u = zc - zr, zc + zr
            pre_low.append(l.reshape(-1))
            pre_high.append(u.reshape(-1))
        else:
            l = np.maximum(l, 0.0)
            u = np.maximum(u, 0.0)
    return ActivationBounds(np.asarray(low).reshape(-1), np.asarray(high).reshape(-1),
                            tuple(pre_low), tuple(pre_high))


def interval_bounds_from_box(net: Network, low, high) -> ActivationBounds:
    """Interval propagation from an explicit input box (no norm semantics)."""
    low = np.asarray(low, dtype=np.float64)
    high = np.asarray(high, dtype=np.float64)
    return _box_through_box(low, high, net)


def interval_bounds(net: Network, x, spec: PerturbationSpec) -> ActivationBounds:
    """Sound per-unit pre-activation intervals over the perturbation ball.

    The fast path handles the L-inf ball only; L1 queries belong to the
    complete verifier.
    """
    if spec.norm != LINF:
        raise ValueError("interval_bounds handles the linf ball only; use the oracle for l1")
    low, high = spec.input_box(np.asarray(x, float).reshape(-1))
    return _box_through_box(low, high, net)


def _margin_rows(weights: np.ndarray, bias: np.ndarray, t: int, targets) -> tuple[np.ndarray, np.ndarray]:
    d = weights[t][None, :] - weights[targets]
    db = bias[t] - bias[targets]
    return d, db


def _dual_lower_bounds(net: Network, bnds: ActivationBounds, coeffs: np.ndarray,
                       consts: np.ndarray) -> np.ndarray:
    """Backward pass: lower-bound each row of coeffs . z_final + consts.

    coeffs has one row per queried linear functional of the logits.  The
    network must be dense (callers linearize convs first).
    """
    linear = net.linear_layers
    depth = len(linear)
    G = coeffs @ linear[-1].weights
    kappa = consts + coeffs @ linear[-1].bias
    for i in range(depth - 2, -1, -1):
        l, u = bnds.pre_low[i], bnds.pre_high[i]
        inactive = u <= 0.0
        active = l >= 0.0
        unstable = ~inactive & ~active
        tiny = unstable & (u - l <= _WIDTH_EPS)
        sloped = unstable & ~tiny
        scale = np.ones_like(l)
        scale[inactive] = 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(sloped, u / (u - l), 0.0)
        scale[sloped] = s[sloped]
        # Negative coefficients ride the upper relaxation a <= s (z - l); its
        # intercept -g s l (g < 0, l < 0) is what the bound pays per layer.
        kappa = kappa + (np.minimum(G[:, sloped], 0.0) * (-s[sloped] * l[sloped])).sum(axis=1)
        if np.any(tiny):
            # Constant bound over a in [0, max(u, 0)]: exact when l == u.
            hi = np.maximum(u[tiny], 0.0)
            kappa = kappa + np.minimum(G[:, tiny] * hi, 0.0).sum(axis=1)
            scale[tiny] = 0.0
        G = G * scale[None, :]
        kappa = kappa + G @ linear[i].bias
        G = G @ linear[i].weights
    lo, hi = bnds.input_low, bnds.input_high
    return kappa + np.where(G > 0, G * lo[None, :], G * hi[None, :]).sum(axis=1)


def dual_margin_bounds(net: Network, x, spec: PerturbationSpec, t: int,
                       targets=None) -> tuple[np.ndarray, np.ndarray]:
    """Sound lower bounds on min over the ball of z_t - z_u for each target u.

    Returns (targets, bounds).  Exact for ReLU-free networks and at
    epsilon = 0.
    """
    if spec.norm != LINF:
        raise ValueError("dual_margin_bounds handles the linf ball only; use the oracle for l1")
    if net.has_conv():
        net = linearize(net)
    if targets is None:
        targets = [u for u in range(net.num_classes) if u != t]
    targets = np.asarray(targets, dtype=np.int64)
    if np.any(targets == t):
        raise ValueError("target class equals the true class")
    bnds = interval_bounds(net, x, spec)
    rows = np.zeros((len(targets), net.num_classes))
    rows[np.arange(len(targets)), t] = 1.0
    rows[np.arange(len(targets)), targets] = -1.0
    bounds = _dual_lower_bounds(net, bnds, rows, np.zeros(len(targets)))
    return targets, bounds


def dual_margin_bound(net: Network, x, spec: PerturbationSpec, t: int, u: int) -> float:
    """Lower bound on the worst-case margin z_t - z_u over the ball."""
    _, vals = dual_margin_bounds(net, x, spec, t, targets=[u])
    return float(vals[0])


def ibp_margin_bounds(net: Network, x, spec: PerturbationSpec, t: int,
                      targets=None) -> tuple[np.ndarray, np.ndarray]:
    """Interval-propagation lower bounds on z_t - z_u per target u.

    The final layer is applied to the penultimate interval as the single
    linear map (w_t - w_u), which is exact for one-layer networks.
    """
    if spec.norm != LINF:
        raise ValueError("ibp_margin_bounds handles the linf ball only; use the oracle for l1")
    if net.has_conv():
        net = linearize(net)
    if targets is None:
        targets = [u for u in range(net.num_classes) if u != t]
    targets = np.asarray(targets, dtype=np.int64)
    if np.any(targets == t):
        raise ValueError("target class equals the true class")
    bnds = interval_bounds(net, x, spec)
    linear = net.linear_layers
    if len(linear) == 1:
        lo, hi = bnds.input_low, bnds.input_high
    else:
        lo = np.maximum(bnds.pre_low[-2], 0.0)
        hi = np.maximum(bnds.pre_high[-2], 0.0)
    c = (lo + hi) / 2
    r = (hi - lo) / 2
    d, db = _margin_rows(linear[-1].weights, linear[-1].bias, t, targets)
    return targets, d @ c - np.abs(d) @ r + db


METHOD_IBP = "ibp"
METHOD_DUAL = "dual"


def certify_single(net: Network, x, t: int, spec: PerturbationSpec,
                   method: str = METHOD_DUAL) -> MarginCertificate:
    """Certificate for one input: margin lower bounds for every class but t."""
    if method == METHOD_IBP:
        targets, vals = ibp_margin_bounds(net, x, spec, t)
    elif method == METHOD_DUAL:
        targets, vals = dual_margin_bounds(net, x, spec, t)
    else:
        raise ValueError(f"unknown certification method {method!r}")
    margins = np.full(net.num_classes, np.nan)
    margins[targets] = vals
    misclassified = predict(net, x) != t
    certified = bool(not misclassified and np.all(vals > 0.0))
    return MarginCertificate(t, margins, certified, method, misclassified)
