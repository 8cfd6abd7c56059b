"""Strategy matrix families, participation modes, and RMSE."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as hs

from corrdp.strategies import (
    BandedStrategy,
    BltStrategy,
    DenseStrategy,
    ParticipationSchema,
    ToeplitzStrategy,
    from_json_dict,
    identity,
    materialize,
    mode_vectors,
    prefix_error_norm,
    rmse,
    to_json_dict,
    toeplitz_inverse_coeffs,
    unamplified_sensitivity,
)


class TestParticipationSchema:
    def test_iterations(self):
        assert ParticipationSchema(8, 4).iterations == 32

    @pytest.mark.parametrize("b, epochs", [(0, 1), (1, 0), (-2, 3)])
    def test_rejects_nonpositive(self, b, epochs):
        with pytest.raises(ValueError):
            ParticipationSchema(b, epochs)


class TestMaterialize:
    def test_toeplitz_order_one(self):
        np.testing.assert_array_equal(materialize(ToeplitzStrategy([1.0])), [[1.0]])

    def test_toeplitz_two(self):
        got = materialize(ToeplitzStrategy([1.0, 0.5]))
        np.testing.assert_array_equal(got, [[1.0, 0.0], [0.5, 1.0]])

    def test_blt_expands_geometrically(self):
        blt = BltStrategy(3, weights=[0.5], decays=[0.5])
        np.testing.assert_allclose(blt.full_coeffs(), [1.0, 0.5, 0.25])

    def test_blt_matches_expanded_toeplitz(self):
        blt = BltStrategy(12, weights=[0.4, 0.1], decays=[0.9, 0.3])
        expanded = ToeplitzStrategy(blt.full_coeffs(), 12)
        np.testing.assert_allclose(materialize(blt), materialize(expanded),
                                   rtol=1e-12)

    def test_banded_places_diagonals(self):
        banded = BandedStrategy(3, ([1.0, 2.0, 3.0], [0.5, 0.6]))
        expected = [[1.0, 0.0, 0.0], [0.5, 2.0, 0.0], [0.0, 0.6, 3.0]]
        np.testing.assert_array_equal(materialize(banded), expected)

    def test_rejects_upper_triangular_entries(self):
        with pytest.raises(ValueError, match="lower triangular"):
            DenseStrategy(np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_rejects_nonpositive_diagonal(self):
        with pytest.raises(ValueError, match="diagonal"):
            DenseStrategy(np.array([[1.0, 0.0], [0.5, 0.0]]))
        with pytest.raises(ValueError):
            ToeplitzStrategy([0.0, 0.5])

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            DenseStrategy(np.array([[1.0, 0.0], [np.inf, 1.0]]))


class TestModeVectors:
    def test_identity_two_epochs(self):
        modes = mode_vectors(identity(4), ParticipationSchema(2, 2))
        expected = np.array([[1, 0], [0, 1], [1, 0], [0, 1]], dtype=float)
        np.testing.assert_array_equal(modes.matrix, expected)

    def test_signed_matrix_uses_absolute_values(self):
        strategy = DenseStrategy(np.array([[1.0, 0.0], [-1.0, 1.0]]))
        modes = mode_vectors(strategy, ParticipationSchema(2, 1))
        np.testing.assert_array_equal(modes.matrix.T, [[1.0, 1.0], [0.0, 1.0]])

    def test_single_batch_sums_all_columns(self):
        n = 6
        modes = mode_vectors(identity(n), ParticipationSchema(1, n))
        np.testing.assert_array_equal(modes.matrix[:, 0], np.ones(n))
        assert modes.max_norm() == pytest.approx(np.sqrt(n))

    def test_sign_invariance_exact(self):
        rng = np.random.default_rng(0)
        raw = np.tril(rng.standard_normal((6, 6)))
        np.fill_diagonal(raw, np.abs(np.diag(raw)) + 0.5)
        schema = ParticipationSchema(3, 2)
        signed = mode_vectors(DenseStrategy(raw), schema)
        unsigned = mode_vectors(DenseStrategy(np.abs(raw)), schema)
        np.testing.assert_array_equal(signed.matrix, unsigned.matrix)

    def test_modes_sum_to_row_sums(self):
        rng = np.random.default_rng(1)
        raw = np.tril(rng.uniform(-1, 1, (8, 8)))
        np.fill_diagonal(raw, 1.0)
        modes = mode_vectors(DenseStrategy(raw), ParticipationSchema(4, 2))
        np.testing.assert_array_equal(modes.matrix.sum(axis=1),
                                      np.abs(raw).sum(axis=1))

    def test_gram_is_symmetric_psd(self):
        modes = mode_vectors(ToeplitzStrategy([1.0, 0.3, 0.1], 8),
                             ParticipationSchema(4, 2))
        gram = modes.gram
        np.testing.assert_allclose(gram, gram.T)
        assert np.linalg.eigvalsh(gram).min() > -1e-12

    def test_order_mismatch_raises(self):
        with pytest.raises(ValueError, match="order"):
            mode_vectors(identity(4), ParticipationSchema(2, 3))


class TestSensitivity:
    def test_single_participation(self):
        assert unamplified_sensitivity(identity(5), ParticipationSchema(5, 1)) == 1.0

    def test_two_epochs(self):
        got = unamplified_sensitivity(identity(4), ParticipationSchema(2, 2))
        assert got == pytest.approx(np.sqrt(2.0))

    def test_signed_matrix(self):
        strategy = DenseStrategy(np.array([[1.0, 0.0], [-1.0, 1.0]]))
        got = unamplified_sensitivity(strategy, ParticipationSchema(2, 1))
        assert got == pytest.approx(np.sqrt(2.0))


class TestToeplitzInverse:
    def test_trivial(self):
        np.testing.assert_array_equal(toeplitz_inverse_coeffs([1.0], 1), [1.0])

    def test_recurrence_by_hand(self):
        np.testing.assert_allclose(toeplitz_inverse_coeffs([1.0, 0.5], 3),
                                   [1.0, -0.5, 0.25])

    def test_scalar_inverse_padded(self):
        np.testing.assert_allclose(toeplitz_inverse_coeffs([2.0], 2), [0.5, 0.0])

    def test_rejects_nonpositive_leading(self):
        with pytest.raises(ValueError):
            toeplitz_inverse_coeffs([0.0, 1.0], 2)

    @settings(max_examples=25, deadline=None)
    @given(hs.lists(hs.floats(0.0, 1.0), min_size=0, max_size=12),
           hs.integers(1, 40))
    def test_inverse_property(self, tail, n):
        # Keep the tail summable below c_0 so the inverse series stays bounded;
        # otherwise the check would only measure float conditioning.
        tail = np.asarray(tail)
        if tail.sum() > 0.9:
            tail = 0.9 * tail / tail.sum()
        coeffs = np.concatenate([[1.0], tail])
        inverse = toeplitz_inverse_coeffs(coeffs, n)
        forward = materialize(ToeplitzStrategy(coeffs[:n], n))
        backward = materialize(ToeplitzStrategy(inverse, n))
        np.testing.assert_allclose(forward @ backward, np.eye(n), atol=1e-10)

    def test_inverse_property_large_order(self):
        rng = np.random.default_rng(7)
        tail = rng.uniform(0, 1, 255)
        tail *= 0.9 / tail.sum()
        coeffs = np.concatenate([[1.0], tail])
        inverse = toeplitz_inverse_coeffs(coeffs, 256)
        product = materialize(ToeplitzStrategy(coeffs, 256)) @ \
            materialize(ToeplitzStrategy(inverse, 256))
        np.testing.assert_allclose(product, np.eye(256), atol=1e-10)


class TestRmse:
    def test_all_ones_strategy_gives_sqrt_n(self):
        n = 7
        strategy = ToeplitzStrategy(np.ones(n), n)
        assert rmse(strategy, 1.0) == pytest.approx(np.sqrt(n))

    def test_identity_counts_workload_entries(self):
        assert rmse(identity(4), 1.0) == pytest.approx(np.sqrt(10.0))

    def test_hand_inverted_two_by_two(self):
        assert rmse(ToeplitzStrategy([1.0, 0.5], 2), 2.0) == pytest.approx(3.0)

    def test_scale_relation(self):
        rng = np.random.default_rng(3)
        coeffs = np.concatenate([[1.0], rng.uniform(0, 0.7, 15)])
        base = rmse(ToeplitzStrategy(coeffs, 16), 1.3)
        for gamma in (0.5, 2.0):
            scaled = rmse(ToeplitzStrategy(gamma * coeffs, 16), gamma * 1.3)
            assert scaled == pytest.approx(base, rel=1e-10)

    @pytest.mark.parametrize("n", [8, 64, 256])
    def test_toeplitz_fast_path_matches_dense(self, n):
        rng = np.random.default_rng(n)
        coeffs = np.concatenate([[1.0], rng.uniform(0, 0.9, n - 1)])
        fast = prefix_error_norm(ToeplitzStrategy(coeffs, n))
        dense = prefix_error_norm(DenseStrategy(
            materialize(ToeplitzStrategy(coeffs, n))))
        assert fast == pytest.approx(dense, rel=1e-8)

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(ValueError):
            rmse(identity(3), 0.0)


class TestSerialization:
    @pytest.mark.parametrize("strategy", [
        identity(5),
        ToeplitzStrategy([1.0, 0.25, 0.1], 6),
        BltStrategy(9, [0.3, 0.2], [0.7, 0.4]),
        DenseStrategy(np.array([[1.0, 0.0], [-0.5, 2.0]])),
        BandedStrategy(4, ([1.0, 1.0, 1.0, 1.0], [0.5, 0.5, 0.5])),
    ])
    def test_round_trip(self, strategy):
        clone = from_json_dict(to_json_dict(strategy))
        np.testing.assert_allclose(materialize(clone), materialize(strategy))
        assert clone.family == strategy.family
        assert clone.order == strategy.order

    def test_unknown_family_rejected(self):
        with pytest.raises(ValueError, match="family"):
            from_json_dict({"order": 2, "family": "circulant", "payload": []})
