"""Linear forms over timestamped controls and their dense stacking."""

import numpy as np
import pytest

from holdlqg import ControlLinForm, axpy, evaluate, to_stacked_row


def form(coeffs, **kw):
    return ControlLinForm.build(coeffs, **kw)


class TestEvaluate:
    def test_empty_form_is_zero(self):
        f = ControlLinForm.zero((2, 2))
        assert np.array_equal(evaluate(f, {0: np.ones(2)}), np.zeros(2))

    def test_identity_coefficient(self):
        f = form({3: np.eye(1)})
        assert evaluate(f, {3: np.array([2.0])}) == pytest.approx([2.0])

    def test_linearity_of_coefficients(self):
        f = form({1: 2.0 * np.eye(1), 0: 3.0 * np.eye(1)})
        out = evaluate(f, {1: np.array([1.0]), 0: np.array([1.0])})
        assert out == pytest.approx([5.0])

    def test_missing_timestamp_raises(self):
        f = form({2: np.eye(1)})
        with pytest.raises(LookupError):
            evaluate(f, {1: np.ones(1)})

    def test_eval_is_linear_in_the_form(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            m = int(rng.integers(1, 4))
            ts = rng.choice(10, size=3, replace=False)
            f = form({int(j): rng.standard_normal((m, m)) for j in ts})
            g = form({int(j): rng.standard_normal((m, m)) for j in ts})
            a = rng.standard_normal((m, m))
            hist = {int(j): rng.standard_normal(m) for j in range(10)}
            lhs = evaluate(axpy(a, f, g), hist)
            rhs = a @ evaluate(f, hist) + evaluate(g, hist)
            assert np.abs(lhs - rhs).max() <= 1e-12 * max(1.0, np.abs(rhs).max())


class TestAxpy:
    def test_identity_times_empty(self):
        f = form({2: np.arange(4.0).reshape(2, 2)})
        out = axpy(np.eye(2), ControlLinForm.zero((2, 2)), f)
        assert np.array_equal(out.coeff(2), f.coeff(2))

    def test_zero_scale_keeps_y(self):
        f = form({1: np.eye(2)})
        g = form({5: 2.0 * np.eye(2)})
        out = axpy(np.zeros((2, 2)), f, g)
        assert np.array_equal(out.coeff(5), g.coeff(5))
        assert np.array_equal(out.coeff(1), np.zeros((2, 2)))

    def test_accumulates_matching_timestamps(self):
        f = form({4: np.eye(2)})
        g = form({4: np.eye(2)})
        out = axpy(2.0 * np.eye(2), f, g)
        assert np.array_equal(out.coeff(4), 3.0 * np.eye(2))

    def test_span_union(self):
        f = form({1: np.eye(1)}, span=(0, 2))
        g = form({5: np.eye(1)})
        assert axpy(np.eye(1), f, g).span == (0, 5)

    def test_dimension_mismatch(self):
        f = form({1: np.eye(2)})
        g = form({1: np.eye(3)})
        with pytest.raises(ValueError):
            axpy(np.eye(2), f, g)


class TestToStackedRow:
    def test_empty_form_state_only_blocks(self):
        state = np.arange(6.0).reshape(2, 3)
        row = to_stacked_row(ControlLinForm.zero((2, 2)), state, 1, 4)
        assert row.control_block.shape == (2, 6)
        assert not row.control_block.any()
        assert np.array_equal(row.state_block, state)
        assert row.width == 9

    def test_single_newest_block(self):
        c = np.arange(4.0).reshape(2, 2)
        row = to_stacked_row(form({3: c}), np.zeros((2, 1)), 3, 4)
        assert np.array_equal(row.control_block, c)

    def test_newest_first_ordering(self):
        # coefficients at t-1, t-2 and tau must land newest first
        t, tau = 5, 2
        c1, c2, c3 = (float(v) * np.eye(1) for v in (10, 20, 30))
        row = to_stacked_row(form({4: c1, 3: c2, 2: c3}), np.zeros((1, 1)), tau, t)
        assert row.control_block.tolist() == [[10.0, 20.0, 30.0]]

    def test_span_outside_range_rejected(self):
        with pytest.raises(ValueError):
            to_stacked_row(form({5: np.eye(1)}), np.zeros((1, 1)), 0, 5)
        with pytest.raises(ValueError):
            to_stacked_row(form({0: np.eye(1)}), np.zeros((1, 1)), 1, 5)

    def test_dense_multiply_matches_evaluate(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            m, n, t = 2, 3, 6
            tau = int(rng.integers(0, t))
            ts = list(range(tau, t))
            picks = [j for j in ts if rng.random() < 0.7]
            f = (
                form({j: rng.standard_normal((m, m)) for j in picks})
                if picks
                else ControlLinForm.zero((m, m))
            )
            state = rng.standard_normal((m, n))
            row = to_stacked_row(f, state, tau, t)
            hist = {j: rng.standard_normal(m) for j in ts}
            x = rng.standard_normal(n)
            stacked = np.concatenate([hist[j] for j in range(t - 1, tau - 1, -1)] + [x])
            lhs = row.as_matrix() @ stacked
            rhs = evaluate(f, hist) + state @ x
            assert np.abs(lhs - rhs).max() <= 1e-13 * max(1.0, np.abs(rhs).max())


def test_duplicate_or_out_of_span_coefficients_rejected():
    with pytest.raises(ValueError):
        ControlLinForm.build({1: np.eye(2), 2: np.eye(3)})
    with pytest.raises(ValueError):
        ControlLinForm.build({4: np.eye(2)}, span=(0, 3))
