"""Tests for the model module: scoring, gradients and best-epoch tracking.

Tests cover:
- predict_score / pairwise_diff hand-computed examples and bounds errors
- sigmoid stability and symmetry
- triple_gradient against a central finite-difference oracle
- accumulate_round snapshot semantics (linearity, duplicates, empty)
- initialize_factors and ensure_finite
- BestEpochTracker keep-the-best behavior
"""

import numpy as np
import pytest

from federank.errors import CatalogBoundsError, DivergenceError
from federank.model import (
    BestEpochTracker,
    ClientState,
    FactorRecommender,
    GradientContribution,
    Regularization,
    ServerModel,
    Triple,
    TripleBatch,
    accumulate_round,
    ensure_finite,
    initialize_factors,
    pairwise_diff,
    predict_score,
    score_all,
    sigmoid,
    triple_gradient,
)

_NO_REG = Regularization(0.0, 0.0, 0.0)


def _objective(Q, b, p, i, j, reg: Regularization) -> float:
    """Regularized log-likelihood of one triple."""
    x = (b[i] + p @ Q[i]) - (b[j] + p @ Q[j])
    log_sig = -np.logaddexp(0.0, -x)
    penalty = (
        reg.user * p @ p
        + reg.positive * (Q[i] @ Q[i] + b[i] ** 2)
        + reg.negative * (Q[j] @ Q[j] + b[j] ** 2)
    )
    return float(log_sig - 0.5 * penalty)


def _close(analytic: float, numeric: float, tol: float = 1e-4) -> bool:
    scale = max(abs(analytic), abs(numeric), 1e-3)
    return abs(analytic - numeric) / scale < tol


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


class TestPredictScore:
    """Tests for predict_score and pairwise_diff."""

    def test_zero_user_vector_leaves_bias(self) -> None:
        model = ServerModel(Q=np.array([[3.0, 7.0]]), b=np.array([0.5]))
        assert predict_score(model, np.zeros(2), 0) == pytest.approx(0.5)

    def test_hand_computed(self) -> None:
        model = ServerModel(Q=np.array([[3.0, -1.0]]), b=np.array([0.25]))
        assert predict_score(model, np.array([1.0, 2.0]), 0) == pytest.approx(1.25)

    def test_three_factors(self) -> None:
        model = ServerModel(Q=np.array([[-1.0, 0.0, 1.0]]), b=np.array([0.0]))
        p = np.array([0.1, 0.2, 0.3])
        assert predict_score(model, p, 0) == pytest.approx(0.2)

    def test_out_of_range_raises(self, server_model: ServerModel) -> None:
        with pytest.raises(CatalogBoundsError):
            predict_score(server_model, np.zeros(4), 6)

    def test_negative_id_raises(self, server_model: ServerModel) -> None:
        with pytest.raises(IndexError):
            predict_score(server_model, np.zeros(4), -1)

    def test_pairwise_diff_subtraction(self) -> None:
        model = ServerModel(
            Q=np.array([[3.0, -1.0], [0.0, 0.0]]), b=np.array([0.25, 0.5])
        )
        assert pairwise_diff(model, np.array([1.0, 2.0]), 0, 1) == pytest.approx(0.75)

    def test_pairwise_diff_identical_items(self) -> None:
        model = ServerModel(Q=np.ones((2, 3)), b=np.array([0.1, 0.1]))
        assert pairwise_diff(model, np.array([0.4, -1.0, 2.0]), 0, 1) == 0.0

    def test_pairwise_diff_antisymmetric(self, server_model: ServerModel) -> None:
        p = np.array([0.3, -0.2, 0.5, 0.1])
        assert pairwise_diff(server_model, p, 1, 4) == pytest.approx(
            -pairwise_diff(server_model, p, 4, 1)
        )

    def test_linear_in_user_vector(self, server_model: ServerModel) -> None:
        model = ServerModel(Q=server_model.Q, b=np.zeros(6))
        p1, p2 = np.array([1.0, 0.0, 2.0, -1.0]), np.array([0.5, 0.5, 0.5, 0.5])
        combined = predict_score(model, 3.0 * p1 + p2, 2)
        expected = 3.0 * predict_score(model, p1, 2) + predict_score(model, p2, 2)
        assert combined == pytest.approx(expected)

    def test_score_all_matches_predict(self, server_model: ServerModel) -> None:
        p = np.array([0.3, -0.2, 0.5, 0.1])
        scores = score_all(server_model, p)
        for i in range(server_model.n_items):
            assert scores[i] == pytest.approx(predict_score(server_model, p, i))


class TestServerModel:
    """Tests for ServerModel shape checks and copies."""

    def test_shape_mismatch_raises(self) -> None:
        with pytest.raises(ValueError):
            ServerModel(Q=np.zeros((3, 2)), b=np.zeros(4))

    def test_copy_is_independent(self, server_model: ServerModel) -> None:
        copy = server_model.copy()
        copy.Q[0, 0] += 1.0
        assert copy.Q[0, 0] != server_model.Q[0, 0]

    def test_dimensions(self, server_model: ServerModel) -> None:
        assert server_model.n_items == 6
        assert server_model.factors == 4


class TestSigmoid:
    """Tests for the numerically stable sigmoid."""

    def test_zero(self) -> None:
        assert sigmoid(0.0) == 0.5

    def test_large_positive_saturates(self) -> None:
        value = sigmoid(700.0)
        assert 0.0 < value <= 1.0

    def test_large_negative_no_nan(self) -> None:
        value = sigmoid(-700.0)
        assert 0.0 <= value < 1.0
        assert not np.isnan(value)

    @pytest.mark.parametrize("x", [0.3, 2.0, 17.5, 400.0])
    def test_symmetry(self, x: float) -> None:
        assert sigmoid(x) + sigmoid(-x) == pytest.approx(1.0)

    def test_vectorized(self) -> None:
        out = sigmoid(np.array([-500.0, 0.0, 500.0]))
        assert out.shape == (3,)
        assert np.isfinite(out).all()


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


class TestTripleGradient:
    """Tests for the per-triple ascent directions."""

    def test_zero_user_vector_without_reg(self) -> None:
        model = ServerModel(Q=np.ones((3, 2)), b=np.zeros(3))
        client = ClientState(0, np.zeros(2), np.array([0]))
        grad = triple_gradient(model, client, Triple(0, 0, 2), _NO_REG)
        dq, db = grad.dq_map(), grad.db_map()
        np.testing.assert_array_equal(dq[0], np.zeros(2))
        np.testing.assert_array_equal(dq[2], np.zeros(2))
        assert db[0] == 0.5
        assert db[2] == -0.5

    def test_sign_antisymmetry_without_reg(
        self, server_model: ServerModel, client: ClientState
    ) -> None:
        grad = triple_gradient(server_model, client, Triple(0, 2, 5), _NO_REG)
        dq, db = grad.dq_map(), grad.db_map()
        np.testing.assert_array_equal(dq[2], -dq[5])
        assert db[2] == -db[5]

    def test_keys_match(
        self, server_model: ServerModel, client: ClientState, reg
    ) -> None:
        grad = triple_gradient(server_model, client, Triple(0, 3, 1), reg)
        assert set(grad.dq_map()) == set(grad.db_map()) == {1, 3}

    def test_finite_difference_oracle(self) -> None:
        rng = np.random.default_rng(2024)
        eps = 1e-6
        for _ in range(100):
            F = int(rng.integers(1, 9))
            n_items = int(rng.integers(2, 7))
            Q = rng.normal(0, 0.5, (n_items, F))
            b = rng.normal(0, 0.5, n_items)
            p = rng.normal(0, 0.5, F)
            i, j = rng.choice(n_items, size=2, replace=False)
            reg = Regularization(*rng.uniform(0, 0.1, 3))
            model = ServerModel(Q=Q.copy(), b=b.copy())
            grad = triple_gradient(
                model, ClientState(0, p.copy(), np.array([i])), Triple(0, i, j), reg
            )

            for f in range(F):
                step = np.zeros(F)
                step[f] = eps
                numeric = (
                    _objective(Q, b, p + step, i, j, reg)
                    - _objective(Q, b, p - step, i, j, reg)
                ) / (2 * eps)
                assert _close(grad.dp[f], numeric)

            for item in (i, j):
                row = int(np.searchsorted(grad.items, item))
                for f in range(F):
                    Qp, Qm = Q.copy(), Q.copy()
                    Qp[item, f] += eps
                    Qm[item, f] -= eps
                    numeric = (
                        _objective(Qp, b, p, i, j, reg)
                        - _objective(Qm, b, p, i, j, reg)
                    ) / (2 * eps)
                    assert _close(grad.dq[row, f], numeric)
                bp, bm = b.copy(), b.copy()
                bp[item] += eps
                bm[item] -= eps
                numeric = (
                    _objective(Q, bp, p, i, j, reg) - _objective(Q, bm, p, i, j, reg)
                ) / (2 * eps)
                assert _close(grad.db[row], numeric)

    def test_out_of_catalog_raises(
        self, server_model: ServerModel, client, reg
    ) -> None:
        with pytest.raises(CatalogBoundsError):
            triple_gradient(server_model, client, Triple(0, 0, 9), reg)

    def test_does_not_modify_inputs(
        self, server_model: ServerModel, client, reg
    ) -> None:
        Q, b, p = server_model.Q.copy(), server_model.b.copy(), client.p.copy()
        triple_gradient(server_model, client, Triple(0, 0, 1), reg)
        np.testing.assert_array_equal(server_model.Q, Q)
        np.testing.assert_array_equal(server_model.b, b)
        np.testing.assert_array_equal(client.p, p)


class TestAccumulateRound:
    """Tests for the snapshot sum over a round's triples."""

    def test_single_triple_equals_triple_gradient(
        self, server_model: ServerModel, client: ClientState, reg
    ) -> None:
        t = Triple(0, 2, 4)
        one = accumulate_round(server_model, client, [t], reg)
        ref = triple_gradient(server_model, client, t, reg)
        np.testing.assert_array_equal(one.items, ref.items)
        np.testing.assert_array_equal(one.dq, ref.dq)
        np.testing.assert_array_equal(one.dp, ref.dp)

    def test_duplicate_triple_doubles(
        self, server_model: ServerModel, client: ClientState, reg
    ) -> None:
        t = Triple(0, 3, 1)
        single = accumulate_round(server_model, client, [t], reg)
        double = accumulate_round(server_model, client, [t, t], reg)
        np.testing.assert_allclose(double.dq, 2 * single.dq, rtol=1e-15)
        np.testing.assert_allclose(double.db, 2 * single.db, rtol=1e-15)
        np.testing.assert_allclose(double.dp, 2 * single.dp, rtol=1e-15)

    def test_matches_brute_force_sum(
        self, server_model: ServerModel, client: ClientState, reg
    ) -> None:
        triples = [Triple(0, 0, 1), Triple(0, 2, 1), Triple(0, 3, 5)]
        total = accumulate_round(server_model, client, triples, reg)
        dq: dict[int, np.ndarray] = {}
        db: dict[int, float] = {}
        dp = np.zeros(4)
        for t in triples:
            g = triple_gradient(server_model, client, t, reg)
            dp += g.dp
            for item, row in g.dq_map().items():
                dq[item] = dq.get(item, np.zeros(4)) + row
            for item, value in g.db_map().items():
                db[item] = db.get(item, 0.0) + value
        assert set(total.dq_map()) == set(dq) == {0, 1, 2, 3, 5}
        for item, row in total.dq_map().items():
            np.testing.assert_allclose(row, dq[item], atol=1e-14)
            assert total.db_map()[item] == pytest.approx(db[item], abs=1e-14)
        np.testing.assert_allclose(total.dp, dp, atol=1e-14)

    def test_empty_round(
        self, server_model: ServerModel, client: ClientState, reg
    ) -> None:
        empty = accumulate_round(server_model, client, [], reg)
        assert len(empty.items) == 0
        assert empty.dq.shape == (0, 4)
        np.testing.assert_array_equal(empty.dp, np.zeros(4))

    def test_accepts_batch(
        self, server_model: ServerModel, client: ClientState, reg
    ) -> None:
        batch = TripleBatch(0, np.array([0, 2]), np.array([1, 4]))
        from_batch = accumulate_round(server_model, client, batch, reg)
        from_list = accumulate_round(server_model, client, list(batch), reg)
        np.testing.assert_array_equal(from_batch.dq, from_list.dq)


class TestGradientContribution:
    """Tests for the empty contribution."""

    def test_empty_shapes(self) -> None:
        empty = GradientContribution.empty(5)
        assert empty.dq.shape == (0, 5)
        assert empty.dq_map() == {}
        assert empty.db_map() == {}


# ---------------------------------------------------------------------------
# Initialization and checks
# ---------------------------------------------------------------------------


class TestInitializeFactors:
    """Tests for seeded initialization."""

    def test_shapes_and_zero_bias(self) -> None:
        server, P = initialize_factors(np.random.default_rng(0), 7, 9, 3)
        assert server.Q.shape == (9, 3)
        assert P.shape == (7, 3)
        np.testing.assert_array_equal(server.b, np.zeros(9))

    def test_seeded(self) -> None:
        a, Pa = initialize_factors(np.random.default_rng(5), 4, 4, 2)
        b, Pb = initialize_factors(np.random.default_rng(5), 4, 4, 2)
        np.testing.assert_array_equal(a.Q, b.Q)
        np.testing.assert_array_equal(Pa, Pb)

    def test_std(self) -> None:
        server, _ = initialize_factors(np.random.default_rng(1), 10, 2000, 20, std=0.1)
        assert server.Q.std() == pytest.approx(0.1, rel=0.02)

    def test_invalid_factors(self) -> None:
        with pytest.raises(ValueError):
            initialize_factors(np.random.default_rng(0), 2, 2, 0)


class TestEnsureFinite:
    """Tests for the divergence guard."""

    def test_finite_passes(self, server_model: ServerModel) -> None:
        ensure_finite(server_model, np.array([0, 1]), "test")

    def test_nan_raises(self, server_model: ServerModel) -> None:
        server_model.b[2] = np.nan
        with pytest.raises(DivergenceError):
            ensure_finite(server_model, np.array([2]), "test")

    def test_only_touched_rows_checked(self, server_model: ServerModel) -> None:
        server_model.Q[5, 0] = np.inf
        ensure_finite(server_model, np.array([0]), "test")
        assert not server_model.is_finite()


class TestFactorRecommender:
    """Tests for the trained-model scorer."""

    def test_scores(self, server_model: ServerModel) -> None:
        P = np.ones((2, 4))
        rec = FactorRecommender(server_model, P)
        np.testing.assert_allclose(rec.score_user(1), score_all(server_model, P[1]))
        assert rec.score(0, 3) == pytest.approx(predict_score(server_model, P[0], 3))


class TestBestEpochTracker:
    """Tests for best-validation-epoch bookkeeping."""

    def test_first_offer_always_kept(self, server_model: ServerModel) -> None:
        tracker = BestEpochTracker()
        assert tracker.offer(0, -np.inf, server_model, np.zeros((2, 4)))
        assert tracker.best_epoch == 0

    def test_keeps_strictly_better(self, server_model: ServerModel) -> None:
        tracker = BestEpochTracker()
        users = np.zeros((2, 4))
        tracker.offer(1, 0.2, server_model, users)
        assert not tracker.offer(2, 0.2, server_model, users)
        assert tracker.offer(3, 0.3, server_model, users)
        assert tracker.best_epoch == 3

    def test_restore_returns_snapshot(self, server_model: ServerModel) -> None:
        tracker = BestEpochTracker()
        users = np.ones((2, 4))
        tracker.offer(1, 0.5, server_model, users)
        before = server_model.Q.copy()
        server_model.Q += 10.0
        users += 10.0
        server, restored_users = tracker.restore()
        np.testing.assert_array_equal(server.Q, before)
        np.testing.assert_array_equal(restored_users, np.ones((2, 4)))

    def test_restore_without_offer_raises(self) -> None:
        with pytest.raises(RuntimeError):
            BestEpochTracker().restore()
