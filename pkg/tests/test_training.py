"""Cost matrices, robust loss gradients, SGD determinism, clustering."""

import numpy as np
import pytest

from jcert.bounds import PerturbationSpec
from jcert.dataio import Dataset, synthetic_blobs
from jcert.netcore import Affine, Network, ReLU, forward
from jcert.training import (
    CostMatrix,
    TrainConfig,
    TrainingDiverged,
    adversarial_cluster,
    cost_matrix_presets,
    robust_loss,
    train,
)
from conftest import make_mlp


def spec_at(eps):
    return PerturbationSpec("linf", eps)


class TestCostMatrixPresets:
    def test_even_seeds(self):
        cm = cost_matrix_presets("seed-set", [0, 2, 4, 6, 8])
        m = cm.matrix
        for i in range(10):
            for j in range(10):
                want = 1 if (i in (0, 2, 4, 6, 8) and j != i) else 0
                assert m[i, j] == want

    def test_overall_has_90_ones(self):
        assert cost_matrix_presets("overall").matrix.sum() == 90

    def test_seed_modulo_5_residue_0(self):
        cm = cost_matrix_presets("seed-modulo", (5, 0))
        rows = sorted(set(np.nonzero(cm.matrix)[0].tolist()))
        assert rows == [0, 5]

    def test_target_set(self):
        cm = cost_matrix_presets("target-set", [1, 3, 5, 7, 9])
        cols = sorted(set(np.nonzero(cm.matrix)[1].tolist()))
        assert cols == [1, 3, 5, 7, 9]
        assert cm.matrix[1, 1] == 0

    def test_empty_preset_rejected(self):
        with pytest.raises(ValueError):
            cost_matrix_presets("seed-set", [])

    def test_out_of_range_class_rejected(self):
        with pytest.raises(ValueError):
            cost_matrix_presets("seed-set", [11])

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            cost_matrix_presets("diagonal")

    def test_validation(self):
        with pytest.raises(ValueError):
            CostMatrix(np.eye(3))  # diagonal entries
        with pytest.raises(ValueError):
            CostMatrix(np.zeros((3, 3)))  # no protected pair
        with pytest.raises(ValueError):
            CostMatrix(2 * (np.ones((3, 3)) - np.eye(3)))  # non-binary

    def test_file_round_trip(self, tmp_path):
        cm = cost_matrix_presets("seed-modulo", (5, 3))
        path = tmp_path / "cm.json"
        cm.save(str(path))
        again = CostMatrix.load(str(path))
        np.testing.assert_array_equal(again.matrix, cm.matrix)


class TestRobustLoss:
    def test_unprotected_labels_reduce_to_cross_entropy(self, rng):
        net = make_mlp(rng, 3, [4], 3)
        X = rng.uniform(0, 1, (6, 3))
        y = np.full(6, 2)  # class 2 has no protected pairs below
        cm = CostMatrix(np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]]))
        loss, _ = robust_loss(net, (X, y), cm, spec_at(0.1))
        logits = np.array([forward(net, x) for x in X])
        shifted = logits - logits.max(axis=1, keepdims=True)
        ce = -(shifted[np.arange(6), y]
               - np.log(np.exp(shifted).sum(axis=1))).mean()
        assert loss == pytest.approx(ce, abs=1e-12)

    def test_zero_radius_uses_exact_margins(self, rng):
        net = make_mlp(rng, 2, [3], 2)
        X = rng.uniform(0, 1, (4, 2))
        y = np.zeros(4, dtype=int)
        cm = CostMatrix(np.array([[0, 1], [0, 0]]))
        loss, _ = robust_loss(net, (X, y), cm, spec_at(0.0))
        logits = np.array([forward(net, x) for x in X])
        shifted = logits - logits.max(axis=1, keepdims=True)
        ce = -(shifted[np.arange(4), y] - np.log(np.exp(shifted).sum(axis=1))).mean()
        margins = logits[:, 0] - logits[:, 1]
        softplus = np.log1p(np.exp(-np.abs(-margins))) + np.maximum(-margins, 0)
        assert loss == pytest.approx(ce + softplus.mean(), abs=1e-9)

    def test_loss_at_least_cross_entropy(self, rng):
        net = make_mlp(rng, 3, [4], 3)
        X = rng.uniform(0, 1, (5, 3))
        y = rng.integers(0, 3, 5)
        cm = cost_matrix_presets("overall", classes=3)
        with_robust, _ = robust_loss(net, (X, y), cm, spec_at(0.05))
        logits = np.array([forward(net, x) for x in X])
        shifted = logits - logits.max(axis=1, keepdims=True)
        ce = -(shifted[np.arange(5), y] - np.log(np.exp(shifted).sum(axis=1))).mean()
        assert with_robust >= ce

    def test_conv_rejected(self, rng):
        from conftest import make_conv_net

        net = make_conv_net(rng, (1, 3, 3), 2, 2, 1, 0, 2)
        cm = CostMatrix(np.array([[0, 1], [0, 0]]))
        with pytest.raises(ValueError, match="dense"):
            robust_loss(net, (np.zeros((1, 9)), np.zeros(1, dtype=int)), cm, spec_at(0.1))

    def test_gradients_match_finite_differences(self):
        # Central differences with step 1e-5 on every weight coordinate.
        step = 1e-5
        configs = 0
        rng = np.random.default_rng(41)
        while configs < 10:
            in_dim = int(rng.integers(2, 5))
            hidden = [int(rng.integers(2, 5))] if rng.uniform() < 0.8 else []
            classes = int(rng.integers(2, 4))
            net = make_mlp(rng, in_dim, hidden, classes)
            B = int(rng.integers(2, 6))
            X = rng.uniform(0, 1, (B, in_dim))
            y = rng.integers(0, classes, B)
            m = (rng.uniform(size=(classes, classes)) < 0.6).astype(int)
            np.fill_diagonal(m, 0)
            if m.sum() == 0:
                continue
            cm = CostMatrix(m)
            eps = float(rng.choice([0.0, 0.03, 0.1]))
            spec = spec_at(eps)
            _, grads = robust_loss(net, (X, y), cm, spec)

            def loss_with(layers):
                return robust_loss(
                    Network(tuple(layers), (in_dim,), classes), (X, y), cm, spec
                )[0]

            layers = list(net.layers)
            linear_positions = [i for i, l in enumerate(layers) if isinstance(l, Affine)]
            for li, pos in enumerate(linear_positions):
                layer = layers[pos]
                dW, db = grads[li]
                for arr, grad in ((layer.weights, dW), (layer.bias, db)):
                    flat = arr.reshape(-1)
                    picks = rng.choice(flat.size, size=min(6, flat.size), replace=False)
                    for idx in picks:
                        for sign, store in ((1, "hi"), (-1, "lo")):
                            bumped = flat.copy()
                            bumped[idx] += sign * step
                            if arr is layer.weights:
                                trial = Affine(bumped.reshape(arr.shape), layer.bias)
                            else:
                                trial = Affine(layer.weights, bumped)
                            layers[pos] = trial
                            if sign == 1:
                                hi = loss_with(layers)
                            else:
                                lo = loss_with(layers)
                        layers[pos] = layer
                        numeric = (hi - lo) / (2 * step)
                        analytic = grad.reshape(-1)[idx]
                        denom = max(abs(numeric), abs(analytic), 1e-3)
                        assert abs(numeric - analytic) / denom <= 1e-4, (
                            f"config {configs}: grad mismatch {analytic} vs {numeric}"
                        )
            configs += 1


class TestTrain:
    def blob_dataset(self, classes=2, n=60, seed=5, sep=10.0):
        return synthetic_blobs(classes, 2, n, seed, sep)

    def test_deterministic_bitwise(self):
        ds = self.blob_dataset()
        cm = cost_matrix_presets("overall", classes=2)
        cfg = TrainConfig(eps_train=0.05, epochs=5, batch_size=16, seed=3, hidden=(8,))
        net1, _ = train(ds, cm, cfg)
        net2, _ = train(ds, cm, cfg)
        for a, b in zip(net1.linear_layers, net2.linear_layers):
            np.testing.assert_array_equal(a.weights, b.weights)
            np.testing.assert_array_equal(a.bias, b.bias)

    def test_lambda_zero_ignores_cost_matrix(self):
        ds = self.blob_dataset()
        cfg = TrainConfig(eps_train=0.05, epochs=4, batch_size=16, seed=3,
                          hidden=(6,), lam=0.0)
        net_a, _ = train(ds, cost_matrix_presets("overall", classes=2), cfg)
        net_b, _ = train(ds, cost_matrix_presets("seed-set", [0], classes=2), cfg)
        for a, b in zip(net_a.linear_layers, net_b.linear_layers):
            np.testing.assert_array_equal(a.weights, b.weights)

    def test_separable_blobs_reach_accuracy_and_certification(self):
        # Regression thresholds fixed after the first calibration run.
        ds = self.blob_dataset(n=120, sep=12.0)
        cm = cost_matrix_presets("overall", classes=2)
        cfg = TrainConfig(eps_train=0.05, epochs=50, batch_size=32, seed=7, hidden=(8,))
        net, log = train(ds, cm, cfg)
        final = log.rows[-1]
        assert final[1] >= 0.95, f"clean accuracy {final[1]}"
        assert final[2] >= 0.80, f"certified rate {final[2]}"

    def test_divergence_raises(self):
        ds = self.blob_dataset()
        cm = cost_matrix_presets("overall", classes=2)
        cfg = TrainConfig(eps_train=0.05, epochs=3, batch_size=8, seed=0,
                          hidden=(8,), lr=1e200, momentum=0.0)
        with np.errstate(over="ignore", invalid="ignore"), pytest.raises(TrainingDiverged):
            train(ds, cm, cfg)

    def test_label_out_of_range_rejected(self):
        ds = self.blob_dataset(classes=3)
        cm = cost_matrix_presets("overall", classes=2)
        with pytest.raises(ValueError):
            train(ds, cm, TrainConfig(epochs=1))

    def test_log_csv(self, tmp_path):
        ds = self.blob_dataset()
        cm = cost_matrix_presets("overall", classes=2)
        _, log = train(ds, cm, TrainConfig(eps_train=0.02, epochs=3, hidden=(4,)))
        path = tmp_path / "log.csv"
        log.to_csv(str(path))
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,clean_acc,cert_rate,loss"
        assert len(lines) == 4

    def test_protected_seeds_certify_better(self):
        # Seed-set training must help its protected rows more than the rest.
        ds = synthetic_blobs(4, 2, 80, seed=11, separation=8.0)
        cm = cost_matrix_presets("seed-set", [0, 1], classes=4)
        cfg = TrainConfig(eps_train=0.06, epochs=40, batch_size=32, seed=2, hidden=(12,))
        net, _ = train(ds, cm, cfg)
        from jcert.bounds import certify_single

        spec = spec_at(0.06)
        rates = {}
        for group, classes in (("protected", (0, 1)), ("unprotected", (2, 3))):
            hits = total = 0
            for x, label in zip(ds.inputs, ds.labels):
                if label not in classes:
                    continue
                total += 1
                hits += certify_single(net, x, int(label), spec, "ibp").certified
            rates[group] = hits / total
        assert rates["protected"] >= rates["unprotected"]


class TestAdversarialCluster:
    def tiny_reference(self, dataset, classes, seed=9):
        cfg = TrainConfig(eps_train=0.02, epochs=25, batch_size=16, seed=seed,
                          hidden=(4,), lam=0.2)
        cm = cost_matrix_presets("overall", classes=classes)
        net, _ = train(dataset, cm, cfg)
        return net

    def test_k_equals_classes_gives_singletons(self):
        ds = synthetic_blobs(3, 2, 30, seed=1, separation=8.0)
        net = self.tiny_reference(ds, 3)
        res = adversarial_cluster(net, 3, ds, samples_per_class=4)
        assert res.groups == ((0,), (1,), (2,))

    def test_duplicated_classes_merge_first(self):
        # Classes 0 and 1 share a distribution; class 2 lives far away.
        base = synthetic_blobs(2, 2, 40, seed=3, separation=9.0)
        far = base.inputs[base.labels == 0]
        near = base.inputs[base.labels == 1]
        X = np.vstack([near, near + 0.01, far])
        y = np.concatenate([np.zeros(len(near)), np.ones(len(near)), np.full(len(far), 2)])
        ds = Dataset(np.clip(X, 0, 1), y.astype(int))
        net = self.tiny_reference(ds, 3)
        res = adversarial_cluster(net, 2, ds, samples_per_class=4)
        assert ((0, 1) in res.groups) and ((2,) in res.groups)
        assert res.confusability.shape == (3, 3)

    def test_insufficient_samples_rejected(self):
        ds = synthetic_blobs(3, 2, 3, seed=1, separation=8.0)
        net = self.tiny_reference(ds, 3)
        with pytest.raises(ValueError, match="samples"):
            adversarial_cluster(net, 2, ds, samples_per_class=10)

    def test_bad_k_rejected(self, rng):
        ds = synthetic_blobs(3, 2, 10, seed=1, separation=8.0)
        net = make_mlp(rng, 2, [3], 3)
        with pytest.raises(ValueError):
            adversarial_cluster(net, 0, ds, samples_per_class=2)
