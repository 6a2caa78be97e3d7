"""Forward evaluation, loss class properties, risk and analytic gradients."""

import json

import numpy as np
import pytest

from dysonnet.errors import DomainError, ShapeError
from dysonnet.net import (
    Dataset,
    LossL0,
    NetworkParams,
    empirical_risk,
    flatten_params,
    forward,
    load_dataset_csv,
    loss,
    network_from_chain_json,
    network_to_chain_json,
    param_group_dims,
    risk_gradient,
    save_dataset_csv,
    unflatten_params,
)
from dysonnet.poset import ActivationRule, estimate_indicator


def random_net(rng, rule=ActivationRule.ARGMAX_MASK_01, max_width=6, max_depth=4):
    depth = int(rng.integers(2, max_depth + 1))
    widths = rng.integers(1, max_width + 1, size=depth)
    weights = tuple(
        rng.standard_normal((widths[i], widths[i + 1])) for i in range(depth - 1)
    )
    return NetworkParams(weights, rng.standard_normal(widths[-1]), rule)


def naive_score(params, x):
    """Independent interpreter: builds the masked matrix product literally."""
    t = np.asarray(x, dtype=float)
    matrix = np.eye(t.size)
    current = t
    for w in params.weights:
        pre = current @ w
        estimated, _ = estimate_indicator(params.rule, pre)
        with np.errstate(invalid="ignore", divide="ignore"):
            mask = np.where(pre != 0.0, estimated / pre, 0.0)
        matrix = matrix @ w @ np.diag(mask)
        current = estimated
    return float(t @ matrix @ params.alpha)


class TestForward:
    def test_fully_active_is_linear(self):
        params = NetworkParams((np.array([[0.7]]),), np.array([0.4]))
        score, states = forward(params, np.array([1.0]))
        assert score == pytest.approx(0.7 * 0.4, abs=0)
        assert states[0].h_prime[0] == 1.0

    def test_all_negative_mask_zeroes(self):
        params = NetworkParams((np.array([[1.0, 1.0]]),), np.array([3.0, -2.0]))
        score, states = forward(params, np.array([-2.0]))
        assert score == 0.0
        assert np.array_equal(states[0].h_tilde, [0.0, 0.0])

    def test_matches_naive_interpreter(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            params = random_net(rng)
            x = rng.standard_normal(params.input_dim)
            score, _ = forward(params, x)
            assert score == pytest.approx(naive_score(params, x), rel=1e-12, abs=1e-12)

    def test_shape_mismatch(self):
        params = NetworkParams((np.ones((2, 2)),), np.ones(2))
        with pytest.raises(ShapeError):
            forward(params, np.ones(3))

    def test_positive_homogeneity_of_masks(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            params = random_net(rng)
            x = rng.standard_normal(params.input_dim)
            c = float(rng.uniform(0.1, 10.0))
            score, states = forward(params, x)
            scaled, scaled_states = forward(params, c * x)
            assert scaled == pytest.approx(c * score, rel=1e-9, abs=1e-12)
            for s, s2 in zip(states, scaled_states):
                assert np.array_equal(s.h_prime, s2.h_prime)


class TestLoss:
    def test_hinge_satisfied(self):
        assert loss(LossL0.HINGE, 2.0, 1.0) == (0.0, 0.0)

    def test_hinge_active(self):
        assert loss(LossL0.HINGE, 0.0, 1.0) == (1.0, -1.0)

    def test_hinge_kink(self):
        assert loss(LossL0.HINGE, 1.0, 1.0) == (0.0, 0.0)

    def test_absolute_minimum(self):
        assert loss(LossL0.ABSOLUTE, -1.0, -1.0) == (0.0, 0.0)

    def test_bad_label(self):
        with pytest.raises(DomainError):
            loss(LossL0.HINGE, 0.0, 0.5)

    @pytest.mark.parametrize("kind", [LossL0.HINGE, LossL0.ABSOLUTE])
    def test_class_predicate(self, kind):
        # nonnegative, convex (midpoint inequality), zero infimum
        rng = np.random.default_rng(9)
        for _ in range(10000):
            y = float(rng.choice([-1.0, 1.0]))
            a, b = rng.standard_normal(2) * 5
            la = loss(kind, a, y)[0]
            lb = loss(kind, b, y)[0]
            lm = loss(kind, (a + b) / 2, y)[0]
            assert la >= 0.0 and lb >= 0.0
            assert lm <= (la + lb) / 2 + 1e-12
        assert loss(kind, 1.0 if kind is LossL0.HINGE else 1.0, 1.0)[0] == 0.0


class TestRisk:
    def test_zero_loss_dataset(self):
        params = NetworkParams((np.array([[2.0]]),), np.array([1.0]))
        dataset = Dataset(np.array([[1.0], [2.0]]), np.array([1.0, 1.0]))
        assert empirical_risk(params, LossL0.HINGE, dataset) == 0.0

    def test_single_sample(self):
        params = NetworkParams((np.array([[0.5]]),), np.array([1.0]))
        dataset = Dataset(np.array([[1.0]]), np.array([1.0]))
        expected = loss(LossL0.HINGE, forward(params, dataset.x[0])[0], 1.0)[0]
        assert empirical_risk(params, LossL0.HINGE, dataset) == expected

    def test_two_sample_mean(self):
        params = NetworkParams((np.array([[1.0]]),), np.array([1.0]))
        # scores 0 and 2 with y=1: hinge 1 and 0
        dataset = Dataset(np.array([[0.0], [2.0]]), np.array([1.0, 1.0]))
        assert empirical_risk(params, LossL0.HINGE, dataset) == 0.5

    def test_empty_dataset(self):
        params = NetworkParams((np.array([[1.0]]),), np.array([1.0]))
        dataset = Dataset(np.empty((0, 1)), np.empty(0))
        with pytest.raises(DomainError):
            empirical_risk(params, LossL0.HINGE, dataset)


class TestGradient:
    def test_zero_loss_gives_zero_vector(self):
        params = NetworkParams((np.array([[2.0]]),), np.array([1.0]))
        dataset = Dataset(np.array([[1.0]]), np.array([1.0]))
        assert np.array_equal(risk_gradient(params, LossL0.HINGE, dataset), [0.0, 0.0])

    def test_hand_case(self):
        # l = 1 - x w a on the active branch: dl/dw = -x a, dl/da = -x w
        x, w, a = 1.5, 0.3, 0.4
        params = NetworkParams((np.array([[w]]),), np.array([a]))
        dataset = Dataset(np.array([[x]]), np.array([1.0]))
        grad = risk_gradient(params, LossL0.HINGE, dataset)
        assert grad == pytest.approx([-x * a, -x * w], abs=1e-15)

    @pytest.mark.parametrize("rule", [ActivationRule.ARGMAX_MASK_01,
                                      ActivationRule.EXPECTATION_MASK_01,
                                      ActivationRule.PARTIAL_EXPECTATION_01,
                                      ActivationRule.PARTIAL_EXPECTATION_PM1])
    def test_finite_difference_agreement(self, rule):
        rng = np.random.default_rng(6)
        checked = 0
        while checked < 8:
            params = random_net(rng, rule=rule)
            dataset = Dataset(
                rng.standard_normal((3, params.input_dim)),
                rng.choice([-1.0, 1.0], size=3),
            )
            if not _clear_of_kinks(params, dataset):
                continue
            checked += 1
            grad = risk_gradient(params, LossL0.HINGE, dataset)
            theta = flatten_params(params)
            step = 1e-6

            def risk_at(vec):
                return empirical_risk(unflatten_params(vec, params), LossL0.HINGE, dataset)

            fd = np.array([
                (risk_at(theta + step * e) - risk_at(theta - step * e)) / (2 * step)
                for e in np.eye(theta.size)
            ])
            scale = max(np.abs(fd).max(), 1e-12)
            assert np.abs(grad - fd).max() / scale <= 1e-5


def _clear_of_kinks(params, dataset, clearance=1e-3):
    for xi, yi in zip(dataset.x, dataset.y):
        score, states = forward(params, xi)
        if abs(1.0 - yi * score) < clearance:
            return False
        if any(np.abs(s.h_hat).min() < clearance for s in states):
            return False
    return True


class TestDatasetAndJson:
    def test_label_validation(self):
        with pytest.raises(DomainError):
            Dataset(np.ones((1, 2)), np.array([0.5]))

    def test_csv_round_trip(self, tmp_path):
        dataset = Dataset(np.array([[0.25, -1.5], [3.0, 0.125]]), np.array([1.0, -1.0]))
        path = tmp_path / "data.csv"
        save_dataset_csv(path, dataset)
        loaded = load_dataset_csv(path)
        assert np.array_equal(loaded.x, dataset.x)
        assert np.array_equal(loaded.y, dataset.y)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(DomainError):
            load_dataset_csv(path)

    def test_chain_json_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        params = NetworkParams(
            (rng.standard_normal((3, 4)), rng.standard_normal((4, 2))),
            rng.standard_normal(2),
            ActivationRule.EXPECTATION_MASK_01,
        )
        path = tmp_path / "net.json"
        path.write_text(json.dumps(network_to_chain_json(params)))
        loaded = network_from_chain_json(path)
        assert loaded.rule is params.rule
        for a, b in zip(loaded.weights, params.weights):
            assert np.array_equal(a, b)
        assert np.array_equal(loaded.alpha, params.alpha)
        x = rng.standard_normal(3)
        assert forward(loaded, x)[0] == forward(params, x)[0]

    def test_non_chain_rejected(self):
        doc = {
            "nodes": ["0", "a", "b"],
            "edges": [["0", "a"], ["0", "b"]],
            "layers": {
                "a": {"rows": 1, "cols": 1, "field": "01", "rule": "relu", "weights": [1]},
                "b": {"rows": 1, "cols": 1, "field": "01", "rule": "relu", "weights": [1]},
            },
        }
        with pytest.raises(DomainError):
            network_from_chain_json(doc)

    def test_top_kernel_must_be_vector(self):
        doc = {
            "nodes": ["0", "1"],
            "edges": [["0", "1"]],
            "layers": {
                "1": {"rows": 1, "cols": 2, "field": "01", "rule": "relu", "weights": [1, 2]},
            },
        }
        with pytest.raises(ShapeError):
            network_from_chain_json(doc)


def test_param_layout_is_column_major():
    params = NetworkParams((np.array([[1.0, 3.0], [2.0, 4.0]]),), np.array([5.0, 6.0]))
    assert param_group_dims(params) == (4, 2)
    assert np.array_equal(flatten_params(params), [1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    rebuilt = unflatten_params(np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), params)
    assert np.array_equal(rebuilt.weights[0], params.weights[0])
