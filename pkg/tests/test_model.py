"""Multilayer perceptron: forward, backward, SGD, serialization.

The backward pass is checked against central finite differences. Instances
whose hidden preactivations sit within 1e-3 of a ReLU kink are redrawn, since
the numeric quotient is meaningless across the kink.
"""

import numpy as np
import pytest

from hfldd.datagen import LabeledDataset, one_hot
from hfldd.errors import DomainError, EmptyInputError, FormatError, ShapeError
from hfldd.model import (
    GradientSet,
    MlpModel,
    SgdConfig,
    accuracy,
    backward,
    cross_entropy,
    dataset_loss,
    forward,
    init_mlp,
    iter_batches,
    local_train,
    sgd_step,
    soft_labels,
)
from hfldd.numkernel import SeededRng


def small_dataset(seed=0, n=12, dim=5, classes=3):
    gen = SeededRng(seed, 0).generator()
    x = gen.standard_normal((n, dim))
    y = one_hot(gen.integers(0, classes, size=n), classes)
    return LabeledDataset(x, y, classes)


def flatten(model):
    return np.concatenate([w.ravel() for w in model.weights] + [b.ravel() for b in model.biases])


class TestInit:
    def test_sizes_and_counts(self):
        m = init_mlp((4, 8, 3), SeededRng(0))
        assert m.layer_sizes() == (4, 8, 3)
        # 4*8 + 8 + 8*3 + 3 = 32 + 8 + 24 + 3
        assert m.parameter_count() == 67

    def test_glorot_bounds_and_zero_biases(self):
        m = init_mlp((10, 6, 2), SeededRng(1))
        limit = np.sqrt(6.0 / 16)
        assert np.all(np.abs(m.weights[0]) <= limit)
        assert all(np.array_equal(b, np.zeros_like(b)) for b in m.biases)

    def test_deterministic(self):
        a = init_mlp((3, 4, 2), SeededRng(9))
        b = init_mlp((3, 4, 2), SeededRng(9))
        assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))

    def test_bad_sizes(self):
        with pytest.raises(DomainError):
            init_mlp((4,), SeededRng(0))
        with pytest.raises(DomainError):
            init_mlp((4, 0, 2), SeededRng(0))


class TestForward:
    def test_rows_are_distributions(self):
        m = init_mlp((5, 7, 3), SeededRng(2))
        p = forward(m, SeededRng(3, 0).generator().standard_normal((8, 5)))
        assert p.shape == (8, 3)
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(p > 0.0)

    def test_zero_model_is_uniform(self):
        m = MlpModel([np.zeros((4, 3))], [np.zeros(3)])
        p = forward(m, np.ones((2, 4)))
        assert np.allclose(p, 1.0 / 3.0, atol=1e-15)

    def test_dim_check(self):
        m = init_mlp((5, 3), SeededRng(0))
        with pytest.raises(ShapeError):
            forward(m, np.ones((2, 4)))


def fd_instance(seed, sizes=(5, 7, 4, 3), n=6, kink_margin=1e-3, attempts=50):
    """Draw (model, x, y) whose ReLU preactivations clear the kink margin."""
    for offset in range(attempts):
        rng = SeededRng(seed, offset)
        m = init_mlp(sizes, rng)
        gen = rng.derive(1000).generator()
        x = gen.standard_normal((n, sizes[0]))
        y = one_hot(gen.integers(0, sizes[-1], size=n), sizes[-1])
        h = x
        clear = True
        for w, b in zip(m.weights[:-1], m.biases[:-1]):
            z = h @ w + b
            if np.min(np.abs(z)) < kink_margin:
                clear = False
                break
            h = np.maximum(z, 0.0)
        if clear:
            return m, x, y
    raise AssertionError("could not draw a kink-free instance")


def loss_at(m, x, y):
    return cross_entropy(forward(m, x), y)


def max_backward_fd_error(m, x, y, eps=1e-6):
    g = backward(m, x, y)
    worst = 0.0
    params = list(zip(m.weights, g.weights)) + list(zip(m.biases, g.biases))
    for arr, grad in params:
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + eps
            up = loss_at(m, x, y)
            arr[idx] = orig - eps
            down = loss_at(m, x, y)
            arr[idx] = orig
            numeric = (up - down) / (2 * eps)
            analytic = grad[idx]
            rel = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-3)
            worst = max(worst, rel)
    return worst


class TestBackward:
    def test_matches_finite_differences(self):
        m, x, y = fd_instance(0)
        assert max_backward_fd_error(m, x, y) <= 1e-4

    def test_soft_targets_supported(self):
        m, x, _ = fd_instance(1)
        gen = SeededRng(1, 5).generator()
        y = gen.dirichlet(np.ones(3), size=x.shape[0])
        assert max_backward_fd_error(m, x, y) <= 1e-4

    def test_shape_checks(self):
        m = init_mlp((4, 3), SeededRng(0))
        with pytest.raises(ShapeError):
            backward(m, np.ones((2, 4)), np.ones((3, 3)) / 3)
        with pytest.raises(ShapeError):
            backward(m, np.ones((2, 5)), np.ones((2, 3)) / 3)
        with pytest.raises(ShapeError):
            backward(m, np.ones((2, 4)), np.ones((2, 2)) / 2)


class TestSgdStep:
    def test_hand_update(self):
        m = MlpModel([np.array([[1.0, 2.0]])], [np.array([3.0, 4.0])])
        g = GradientSet([np.array([[10.0, 20.0]])], [np.array([30.0, 40.0])])
        out = sgd_step(m, g, 0.1)
        assert np.allclose(out.weights[0], [[0.0, 0.0]], atol=1e-15)
        assert np.allclose(out.biases[0], [0.0, 0.0], atol=1e-15)

    def test_inputs_untouched(self):
        m = MlpModel([np.array([[1.0]])], [np.array([2.0])])
        g = GradientSet([np.array([[1.0]])], [np.array([1.0])])
        sgd_step(m, g, 0.5)
        assert m.weights[0][0, 0] == 1.0 and m.biases[0][0] == 2.0

    def test_shape_mismatch(self):
        m = MlpModel([np.ones((2, 2))], [np.ones(2)])
        g = GradientSet([np.ones((2, 3))], [np.ones(2)])
        with pytest.raises(ShapeError):
            sgd_step(m, g, 0.1)


class TestIterBatches:
    def test_each_cycle_is_a_permutation(self):
        gen = SeededRng(4, 0).generator()
        batches = iter_batches(10, 3, gen)
        cycle = np.concatenate([next(batches) for _ in range(4)])
        assert sorted(cycle) == list(range(10))
        # sizes: 3, 3, 3, then the 1-row remainder
        assert len(cycle) == 10

    def test_batch_at_least_dataset(self):
        gen = SeededRng(4, 1).generator()
        batches = iter_batches(4, 100, gen)
        assert sorted(next(batches)) == list(range(4))


class TestLocalTrain:
    def test_zero_steps_is_identity(self):
        d = small_dataset()
        m = init_mlp((5, 4, 3), SeededRng(5))
        out = local_train(m, d, SgdConfig(0.1, 4, 0), SeededRng(5, 1))
        assert out is m

    def test_deterministic_and_pure(self):
        d = small_dataset()
        m = init_mlp((5, 4, 3), SeededRng(5))
        before = flatten(m).copy()
        a = local_train(m, d, SgdConfig(0.1, 4, 6), SeededRng(5, 1))
        b = local_train(m, d, SgdConfig(0.1, 4, 6), SeededRng(5, 1))
        assert np.array_equal(flatten(a), flatten(b))
        assert np.array_equal(flatten(m), before)
        assert not np.array_equal(flatten(a), before)

    def test_training_reduces_loss(self):
        d = small_dataset(seed=2, n=60)
        m = init_mlp((5, 8, 3), SeededRng(6))
        out = local_train(m, d, SgdConfig(0.2, 10, 120), SeededRng(6, 1))
        assert dataset_loss(out, d) < dataset_loss(m, d)

    def test_empty_dataset_rejected(self):
        d = LabeledDataset(np.zeros((0, 5)), np.zeros((0, 3)), 3)
        m = init_mlp((5, 3), SeededRng(0))
        with pytest.raises(EmptyInputError):
            local_train(m, d, SgdConfig(0.1, 4, 1), SeededRng(0, 1))


class TestSgdConfig:
    @pytest.mark.parametrize(
        "kw",
        [
            dict(learning_rate=0.0, batch_size=1, steps=1),
            dict(learning_rate=0.1, batch_size=0, steps=1),
            dict(learning_rate=0.1, batch_size=1, steps=-1),
        ],
    )
    def test_validation(self, kw):
        with pytest.raises(DomainError):
            SgdConfig(**kw)


class TestSoftLabels:
    def test_clamped_distributions(self):
        d = small_dataset()
        m = init_mlp((5, 4, 3), SeededRng(7))
        s = soft_labels(m, d)
        assert s.shape == (d.n_rows(), 3)
        assert np.all(s >= 1e-12)
        assert np.max(np.abs(s.sum(axis=1) - 1.0)) <= 1e-9

    def test_empty_probe_rejected(self):
        m = init_mlp((5, 3), SeededRng(0))
        with pytest.raises(EmptyInputError):
            soft_labels(m, LabeledDataset(np.zeros((0, 5)), np.zeros((0, 3)), 3))


class TestLossAndAccuracy:
    def test_cross_entropy_hand_value(self):
        # -(ln 0.5 + ln 0.75) / 2
        probs = [[0.5, 0.5], [0.25, 0.75]]
        y = [[1.0, 0.0], [0.0, 1.0]]
        expected = -(np.log(0.5) + np.log(0.75)) / 2
        assert cross_entropy(probs, y) == pytest.approx(expected, abs=1e-15)

    def test_cross_entropy_shape_check(self):
        with pytest.raises(ShapeError):
            cross_entropy(np.ones((2, 3)) / 3, np.ones((2, 2)) / 2)

    def test_accuracy_hand_value(self):
        d = LabeledDataset(np.eye(3), one_hot([0, 1, 2], 3), 3)
        m = MlpModel([np.eye(3) * 5.0], [np.zeros(3)])
        assert accuracy(m, d) == 1.0
        wrong = MlpModel([-np.eye(3) * 5.0], [np.zeros(3)])
        assert accuracy(wrong, d) < 1.0


class TestSerialization:
    def test_round_trip_bit_exact(self):
        m = init_mlp((6, 5, 4), SeededRng(8))
        back = MlpModel.from_bytes(m.to_bytes())
        assert back.layer_sizes() == m.layer_sizes()
        assert np.array_equal(flatten(back), flatten(m))

    def test_truncated_rejected(self):
        blob = init_mlp((3, 2), SeededRng(0)).to_bytes()
        with pytest.raises(FormatError):
            MlpModel.from_bytes(blob[:-4])

    def test_trailing_bytes_rejected(self):
        blob = init_mlp((3, 2), SeededRng(0)).to_bytes()
        with pytest.raises(FormatError):
            MlpModel.from_bytes(blob + b"\x00")

    def test_empty_rejected(self):
        with pytest.raises(FormatError):
            MlpModel.from_bytes(b"")
