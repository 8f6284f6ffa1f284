import math

import numpy as np
import pytest

from pmilab.core import DataError, seeded_rng
from pmilab.objectives import (
    LOG_DENSITY_FLOOR,
    ScoreBatch,
    fdiv_loss,
    infonce_batch_loss,
    infonce_loss,
    kde_fit,
    kde_log_density,
    kde_score,
    kde_score_batch,
    mine_loss,
    objective_loss,
    pmiscore_loss,
)
from pmilab.synthetic import make_block, mutual_information, pmi_table


def random_batch(seed, n_pos=13, n_neg=29, scale=3.0, grouped=False):
    rng = seeded_rng(seed)
    if grouped:
        k = n_neg // n_pos
        n_neg = n_pos * k
        groups = np.arange(n_neg).reshape(n_pos, k)
    else:
        groups = None
    return ScoreBatch(
        rng.uniform(-scale, scale, n_pos),
        rng.uniform(-scale, scale, n_neg),
        groups=groups,
    )


class TestPmiscoreLoss:
    def test_zero_scores(self):
        loss, _, _ = pmiscore_loss(ScoreBatch([0.0], [0.0]))
        assert loss == 1.0  # -(0 - exp(0))

    def test_optimal_scores_give_mi_minus_one(self):
        # brute force over all cells of an enumerable spec: plug s* = pmi
        # into expectations under the exact joint / product measures
        spec = make_block(4, 2, 0.2)
        pmi = pmi_table(spec)
        prod = np.outer(spec.ctx_marginal(), spec.resp_marginal())
        pos_term = float((spec.probs * pmi).sum())          # E+[s*] = MI
        neg_term = float((prod * np.exp(pmi)).sum())        # E-[e^s*] = 1
        assert neg_term == pytest.approx(1.0, abs=1e-12)
        assert -( -(pos_term - neg_term)) == pytest.approx(
            mutual_information(spec) - 1.0, abs=1e-12
        )

    def test_gradient_matches_finite_differences(self):
        h = 1e-6
        for seed in range(30):
            batch = random_batch(seed)
            _, dpos, dneg = pmiscore_loss(batch)
            for arr, grad in ((batch.pos_scores, dpos), (batch.neg_scores, dneg)):
                for k in (0, arr.size - 1):
                    arr[k] += h
                    hi, _, _ = pmiscore_loss(batch)
                    arr[k] -= 2 * h
                    lo, _, _ = pmiscore_loss(batch)
                    arr[k] += h
                    fd = (hi - lo) / (2 * h)
                    assert abs(fd - grad[k]) / max(abs(fd), 1e-9) < 1e-6

    def test_empty_side_errors(self):
        with pytest.raises(DataError):
            pmiscore_loss(ScoreBatch([], [0.0]))

    def test_not_shift_invariant(self):
        batch = random_batch(3)
        base, _, _ = pmiscore_loss(batch)
        shifted = ScoreBatch(batch.pos_scores + 1.0, batch.neg_scores + 1.0)
        moved, _, _ = pmiscore_loss(shifted)
        assert moved != pytest.approx(base)


class TestMineLoss:
    def test_constant_scores_zero_loss(self):
        loss, _, _ = mine_loss(ScoreBatch([1.7, 1.7], [1.7, 1.7, 1.7]))
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_hand_value(self):
        # pos=[1], neg=[0,0]: log mean exp(0) = 0, loss = -(1 - 0) = -1
        loss, _, _ = mine_loss(ScoreBatch([1.0], [0.0, 0.0]))
        assert loss == pytest.approx(-1.0, abs=1e-12)

    def test_gradients_are_softmax_weights(self):
        batch = random_batch(5)
        _, _, dneg = mine_loss(batch)
        assert dneg.sum() == pytest.approx(1.0, abs=1e-12)
        assert (dneg > 0).all()

    def test_gradient_matches_finite_differences(self):
        h = 1e-6
        for seed in range(30):
            batch = random_batch(seed + 100)
            _, dpos, dneg = mine_loss(batch)
            for arr, grad in ((batch.pos_scores, dpos), (batch.neg_scores, dneg)):
                for k in (0, arr.size // 2):
                    arr[k] += h
                    hi, _, _ = mine_loss(batch)
                    arr[k] -= 2 * h
                    lo, _, _ = mine_loss(batch)
                    arr[k] += h
                    fd = (hi - lo) / (2 * h)
                    assert abs(fd - grad[k]) / max(abs(fd), 1e-9) < 1e-6


class TestInfonceLoss:
    def test_all_zero_scores(self):
        loss, _ = infonce_loss(0.0, [0.0, 0.0, 0.0])
        assert loss == pytest.approx(math.log(4), abs=1e-12)

    def test_saturated_limit(self):
        loss, _ = infonce_loss(20.0, [-20.0, -20.0, -20.0])
        assert loss == pytest.approx(0.0, abs=1e-10)

    def test_shift_invariance(self):
        rng = seeded_rng(0)
        pos = float(rng.uniform(-2, 2))
        negs = rng.uniform(-2, 2, 5)
        base, _ = infonce_loss(pos, negs)
        shifted, _ = infonce_loss(pos + 7.3, negs + 7.3)
        assert shifted == pytest.approx(base, abs=1e-12)

    def test_batch_matches_per_pair_mean(self):
        batch = random_batch(9, n_pos=6, n_neg=24, grouped=True)
        loss, dpos, dneg = infonce_batch_loss(batch)
        singles = [
            infonce_loss(p, batch.neg_scores[g])[0]
            for p, g in zip(batch.pos_scores, batch.groups)
        ]
        assert loss == pytest.approx(np.mean(singles), abs=1e-12)

    def test_batch_gradient_matches_finite_differences(self):
        h = 1e-6
        batch = random_batch(11, n_pos=5, n_neg=20, grouped=True)
        _, dpos, dneg = infonce_batch_loss(batch)
        for arr, grad in ((batch.pos_scores, dpos), (batch.neg_scores, dneg)):
            for k in range(arr.size):
                arr[k] += h
                hi, _, _ = infonce_batch_loss(batch)
                arr[k] -= 2 * h
                lo, _, _ = infonce_batch_loss(batch)
                arr[k] += h
                fd = (hi - lo) / (2 * h)
                assert abs(fd - grad[k]) / max(abs(fd), 1e-9) < 1e-6

    def test_batch_requires_groups(self):
        with pytest.raises(DataError, match="group"):
            infonce_batch_loss(ScoreBatch([0.0], [0.0]))


class TestFdivLoss:
    def test_kl_at_zero_scores(self):
        loss, _, _ = fdiv_loss("kl", ScoreBatch([0.0, 0.0], [0.0]))
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_pearson_chi2_at_zero_scores(self):
        loss, _, _ = fdiv_loss("pearson_chi2", ScoreBatch([0.0], [0.0, 0.0]))
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_kl_differs_from_pmiscore_by_one(self):
        for seed in range(100):
            batch = random_batch(seed, scale=5.0)
            lp, dp_pos, dp_neg = pmiscore_loss(batch)
            lk, dk_pos, dk_neg = fdiv_loss("kl", batch)
            assert lp - lk == pytest.approx(1.0, abs=1e-12)
            assert np.allclose(dp_pos, dk_pos) and np.allclose(dp_neg, dk_neg)

    @pytest.mark.parametrize(
        "kind", ["kl", "pearson_chi2", "jensen_shannon", "squared_hellinger"]
    )
    def test_gradients_match_finite_differences(self, kind):
        h = 1e-6
        for seed in range(25):
            batch = random_batch(seed, scale=2.0)
            _, dpos, dneg = fdiv_loss(kind, batch)
            for arr, grad in ((batch.pos_scores, dpos), (batch.neg_scores, dneg)):
                for k in (0, arr.size - 1):
                    arr[k] += h
                    hi, _, _ = fdiv_loss(kind, batch)
                    arr[k] -= 2 * h
                    lo, _, _ = fdiv_loss(kind, batch)
                    arr[k] += h
                    fd = (hi - lo) / (2 * h)
                    assert abs(fd - grad[k]) / max(abs(fd), abs(grad[k]), 1e-9) < 1e-6

    def test_total_variation_zero_gradient(self):
        batch = random_batch(2)
        loss, dpos, dneg = fdiv_loss("total_variation", batch)
        assert math.isfinite(loss)
        assert not dpos.any() and not dneg.any()

    def test_unsupported_kind(self):
        with pytest.raises(DataError):
            fdiv_loss("renyi", random_batch(0))

    def test_optimal_discriminator_fixed_point(self):
        # per-cell minimization of the dual loss recovers pmi exactly
        spec = make_block(4, 2, 0.2)
        pmi = pmi_table(spec)
        prod = np.outer(spec.ctx_marginal(), spec.resp_marginal())
        s = np.zeros_like(prod)
        for _ in range(60):  # Newton steps; cells decouple
            grad = -spec.probs + prod * np.exp(s)
            s -= grad / (prod * np.exp(s))
        assert np.abs(s - pmi).max() < 1e-10


class TestObjectiveDispatch:
    def test_names(self):
        batch = random_batch(1, grouped=True)
        for name in ("pmiscore", "mine", "infonce", "fdiv:kl", "fdiv:jensen_shannon"):
            loss, dpos, dneg = objective_loss(name, batch)
            assert math.isfinite(loss)

    def test_total_variation_not_trainable(self):
        with pytest.raises(DataError, match="evaluation-only"):
            objective_loss("fdiv:total_variation", random_batch(0))

    def test_unknown(self):
        with pytest.raises(DataError):
            objective_loss("banana", random_batch(0))


class TestKde:
    def test_gaussian_log_density_at_zero(self):
        rng = seeded_rng(7)
        pos = rng.standard_normal((5000, 1))
        neg = rng.standard_normal((5000, 1))
        model = kde_fit(pos, neg)
        ld = kde_log_density(model, np.array([[0.0]]), side="pos")[0]
        assert ld == pytest.approx(-0.5 * math.log(2 * math.pi), abs=0.1)

    def test_identical_fits_score_zero(self):
        rng = seeded_rng(8)
        pts = rng.standard_normal((400, 3))
        model = kde_fit(pts, pts.copy())
        assert np.abs(kde_score_batch(model, pts)).max() <= 1e-6

    def test_fit_point_is_finite(self):
        rng = seeded_rng(9)
        pos = rng.standard_normal((50, 4))
        neg = rng.standard_normal((60, 4))
        model = kde_fit(pos, neg)
        assert np.isfinite(kde_score(model, pos[0])).all()

    def test_far_point_floored_not_inf(self):
        rng = seeded_rng(10)
        model = kde_fit(rng.standard_normal((50, 2)), rng.standard_normal((50, 2)))
        score = kde_score(model, np.array([1e6, -1e6]))
        assert math.isfinite(score)

    def test_no_projection_below_128_dims(self):
        rng = seeded_rng(11)
        model = kde_fit(
            rng.standard_normal((40, 10)), rng.standard_normal((40, 10)), use_pca=True
        )
        assert model.projection is None

    def test_projection_above_128_dims(self):
        rng = seeded_rng(12)
        model = kde_fit(
            rng.standard_normal((200, 150)),
            rng.standard_normal((200, 150)),
            use_pca=True,
        )
        assert model.projection is not None
        assert model.projection.shape == (150, 128)
        gram = model.projection.T @ model.projection
        assert np.allclose(gram, np.eye(128), atol=1e-10)

    def test_zero_variance_dimension_dropped(self):
        rng = seeded_rng(13)
        pos = rng.standard_normal((30, 3))
        neg = rng.standard_normal((30, 3))
        pos[:, 1] = 5.0
        neg[:, 1] = 5.0
        with pytest.warns(UserWarning, match="zero-variance"):
            model = kde_fit(pos, neg)
        assert model.keep.tolist() == [True, False, True]
        assert math.isfinite(kde_score(model, pos[0]))

    def test_correlated_toy_scores_matched_pairs_higher(self):
        # x, y = x pairs against shuffled pairs; matched pairs sit on the
        # diagonal where the joint density exceeds the product density
        rng = seeded_rng(14)
        x = rng.standard_normal(800)
        pos = np.stack([x, x + 0.1 * rng.standard_normal(800)], axis=1)
        neg = np.stack([x, np.roll(x, 1)], axis=1)
        model = kde_fit(pos, neg)
        matched = kde_score_batch(model, pos[:100])
        assert matched.mean() > 0.5

    def test_cv_bandwidth_runs(self):
        rng = seeded_rng(15)
        model = kde_fit(
            rng.standard_normal((120, 2)),
            rng.standard_normal((120, 2)),
            bandwidth="cv",
        )
        assert (model.bandwidth_pos > 0).all()

    def test_joint_marginal_mode(self):
        # independent halves: log p(x,y) - log p(x) - log p(y) should be ~0
        rng = seeded_rng(16)
        pos = rng.standard_normal((1500, 2))
        neg = rng.standard_normal((1500, 2))
        model = kde_fit(pos, neg, mode="joint_marginal", split_dim=1)
        scores = kde_score_batch(model, rng.standard_normal((200, 2)) * 0.5)
        assert np.abs(scores).mean() < 0.2

    def test_too_few_samples(self):
        with pytest.raises(DataError):
            kde_fit(np.ones((1, 2)), np.ones((5, 2)))

    def test_floor_constant(self):
        assert LOG_DENSITY_FLOOR == -745.0
