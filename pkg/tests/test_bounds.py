"""Interval and dual bounds: analytic cases, containment, soundness."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jcert.bounds import (
    PerturbationSpec,
    certify_single,
    dual_margin_bound,
    dual_margin_bounds,
    ibp_margin_bounds,
    interval_bounds,
)
from jcert.netcore import Affine, Network, ReLU, forward
from conftest import make_conv_net, make_mlp

FREE = PerturbationSpec("linf", 0.1, -np.inf, np.inf)


def spec_at(eps, low=0.0, high=1.0):
    return PerturbationSpec("linf", eps, low, high)


class TestPerturbationSpec:
    def test_rejects_negative_epsilon(self):
        with pytest.raises(ValueError):
            PerturbationSpec("linf", -0.1)

    def test_rejects_unknown_norm(self):
        with pytest.raises(ValueError):
            PerturbationSpec("l2", 0.1)

    def test_input_box_clips_to_domain(self):
        low, high = spec_at(0.2).input_box(np.array([0.1, 0.9]))
        np.testing.assert_allclose(low, [0.0, 0.7])
        np.testing.assert_allclose(high, [0.3, 1.0])

    def test_contains(self):
        spec = spec_at(0.1)
        assert spec.contains([0.5, 0.5], [0.55, 0.45])
        assert not spec.contains([0.5, 0.5], [0.65, 0.5])
        assert not spec.contains([0.05, 0.5], [-0.01, 0.5])


class TestIntervalBounds:
    def test_analytic_difference_row(self):
        net = Network((Affine([[1.0, -1.0]], [0.0]),), (2,), 1)
        bnds = interval_bounds(net, [0.5, 0.5], FREE)
        np.testing.assert_allclose(bnds.logit_low, [-0.2])
        np.testing.assert_allclose(bnds.logit_high, [0.2])

    def test_zero_radius_collapses_to_forward(self, rng):
        net = make_mlp(rng, 4, [5, 3], 3)
        x = rng.uniform(0, 1, 4)
        bnds = interval_bounds(net, x, spec_at(0.0))
        np.testing.assert_allclose(bnds.logit_low, forward(net, x), atol=1e-12)
        np.testing.assert_allclose(bnds.logit_high, forward(net, x), atol=1e-12)

    def test_monte_carlo_containment(self, rng):
        net = make_mlp(rng, 3, [6], 4)
        x = rng.uniform(0, 1, 3)
        spec = spec_at(0.05)
        bnds = interval_bounds(net, x, spec)
        low, high = spec.input_box(x)
        samples = rng.uniform(low, high, (10_000, 3))
        for s in samples:
            z = forward(net, s)
            assert np.all(z >= bnds.logit_low - 1e-9)
            assert np.all(z <= bnds.logit_high + 1e-9)

    def test_containment_through_conv(self, rng):
        net = make_conv_net(rng, (1, 3, 3), 2, 2, 1, 0, 3)
        x = rng.uniform(0, 1, (1, 3, 3))
        spec = spec_at(0.03)
        bnds = interval_bounds(net, x.reshape(-1), spec)
        low, high = spec.input_box(x.reshape(-1))
        for _ in range(2_000):
            s = rng.uniform(low, high)
            z = forward(net, s)
            assert np.all(z >= bnds.logit_low - 1e-9)
            assert np.all(z <= bnds.logit_high + 1e-9)

    def test_l1_rejected(self):
        net = Network((Affine([[1.0, -1.0]], [0.0]),), (2,), 1)
        with pytest.raises(ValueError, match="linf"):
            interval_bounds(net, [0.5, 0.5], PerturbationSpec("l1", 0.1))


class TestDualBound:
    def test_linear_net_is_exact(self):
        # Single affine: bound must equal d.x + db - eps*||d||_1 (no clipping).
        w = np.array([[1.0, -1.0], [0.5, 2.0]])
        b = np.array([0.3, -0.2])
        net = Network((Affine(w, b),), (2,), 2)
        x = np.array([0.4, 0.6])
        d = w[0] - w[1]
        db = b[0] - b[1]
        want = d @ x + db - 0.1 * np.abs(d).sum()
        got = dual_margin_bound(net, x, FREE, 0, 1)
        assert got == pytest.approx(want, abs=1e-12)

    def test_linear_net_with_domain_clipping(self):
        w = np.array([[1.0, 0.0], [0.0, 1.0]])
        net = Network((Affine(w, np.zeros(2)),), (2,), 2)
        x = np.array([0.05, 0.5])
        # Box: [0, 0.15] x [0.4, 0.6]; min of z0 - z1 at x0=0, x1=0.6.
        got = dual_margin_bound(net, x, spec_at(0.1), 0, 1)
        assert got == pytest.approx(0.0 - 0.6, abs=1e-12)

    def test_zero_radius_gives_exact_margins(self, rng):
        for _ in range(10):
            net = make_mlp(rng, 3, [4, 4], 3)
            x = rng.uniform(0, 1, 3)
            z = forward(net, x)
            for t in range(3):
                targets, vals = dual_margin_bounds(net, x, spec_at(0.0), t)
                for u, v in zip(targets, vals):
                    assert v == pytest.approx(z[t] - z[u], abs=1e-9)

    def test_sound_against_sampling(self, rng):
        # Sampled minima over the ball upper-bound the true minimum, so the
        # dual bound must sit below them.
        for _ in range(15):
            net = make_mlp(rng, 2, [5], 2)
            x = rng.uniform(0, 1, 2)
            spec = spec_at(0.08)
            low, high = spec.input_box(x)
            samples = rng.uniform(low, high, (2_000, 2))
            margins = np.array([forward(net, s) @ [1.0, -1.0] for s in samples])
            bound = dual_margin_bound(net, x, spec, 0, 1)
            assert bound <= margins.min() + 1e-9

    def test_rejects_equal_classes(self, rng):
        net = make_mlp(rng, 2, [3], 2)
        with pytest.raises(ValueError):
            dual_margin_bound(net, [0.2, 0.3], spec_at(0.1), 1, 1)


class TestIbpMargins:
    def test_zero_radius_exact(self, rng):
        net = make_mlp(rng, 3, [4], 3)
        x = rng.uniform(0, 1, 3)
        z = forward(net, x)
        targets, vals = ibp_margin_bounds(net, x, spec_at(0.0), 1)
        for u, v in zip(targets, vals):
            assert v == pytest.approx(z[1] - z[u], abs=1e-9)

    def test_single_layer_margin_is_exact_minimum(self):
        w = np.array([[1.0, -1.0], [0.5, 2.0]])
        net = Network((Affine(w, np.zeros(2)),), (2,), 2)
        x = np.array([0.4, 0.6])
        d = w[0] - w[1]
        want = d @ x - 0.1 * np.abs(d).sum()
        _, vals = ibp_margin_bounds(net, x, FREE, 0, targets=[1])
        assert vals[0] == pytest.approx(want, abs=1e-12)


class TestCertifySingle:
    def test_zero_radius_correct_input_certified(self, rng):
        net = make_mlp(rng, 3, [4], 3)
        x = rng.uniform(0, 1, 3)
        t = int(np.argmax(forward(net, x)))
        for method in ("ibp", "dual"):
            cert = certify_single(net, x, t, spec_at(0.0), method)
            assert cert.certified
            assert not cert.misclassified
            assert np.isnan(cert.margins[t])

    def test_misclassified_never_certified(self, rng):
        net = make_mlp(rng, 3, [4], 3)
        x = rng.uniform(0, 1, 3)
        t = int(np.argmin(forward(net, x)))
        cert = certify_single(net, x, t, spec_at(0.0), "dual")
        assert cert.misclassified and not cert.certified

    def test_tie_is_not_certified(self):
        # Both logits identical everywhere: margin 0, strictly-positive rule.
        net = Network((Affine([[1.0], [1.0]], [0.0, 0.0]),), (1,), 2)
        cert = certify_single(net, [0.5], 0, spec_at(0.0), "dual")
        assert not cert.certified

    def test_unknown_method_rejected(self, rng):
        net = make_mlp(rng, 2, [], 2)
        with pytest.raises(ValueError):
            certify_single(net, [0.1, 0.2], 0, spec_at(0.0), "milp")

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from(["ibp", "dual"]))
    def test_epsilon_monotonicity(self, seed, method):
        rng = np.random.default_rng(seed)
        net = make_mlp(rng, 2, [3], 2)
        x = rng.uniform(0, 1, 2)
        t = int(np.argmax(forward(net, x)))
        decisions = [
            certify_single(net, x, t, spec_at(eps), method).certified
            for eps in np.linspace(0.0, 0.2, 21)
        ]
        # Once certification is lost it must stay lost as the ball grows.
        for small, large in zip(decisions, decisions[1:]):
            assert small or not large

    def test_margin_bounds_shrink_with_epsilon(self, rng):
        net = make_mlp(rng, 3, [5], 3)
        x = rng.uniform(0, 1, 3)
        t = int(np.argmax(forward(net, x)))
        for method in ("ibp", "dual"):
            prev = None
            for eps in np.linspace(0.0, 0.15, 16):
                cert = certify_single(net, x, t, spec_at(eps), method)
                if prev is not None:
                    assert cert.min_margin <= prev + 1e-9
                prev = cert.min_margin
