import itertools
import math

import numpy as np
import pytest

from pmilab.core import DataError, seeded_rng
from pmilab.synthetic import (
    JointSpec,
    SyntheticEmbedConfig,
    SyntheticEmbedder,
    analytic_pmi,
    embed_synthetic,
    make_block,
    make_diagonal,
    make_independent,
    mutual_information,
    pmi_table,
    sample_pairs,
)


class TestMakeDiagonal:
    def test_eps_zero(self):
        spec = make_diagonal(2, 0.0)
        assert spec.probs.tolist() == [[0.5, 0.0], [0.0, 0.5]]

    def test_eps_point_one(self):
        spec = make_diagonal(2, 0.1)
        assert spec.probs.ravel().tolist() == pytest.approx([0.45, 0.05, 0.05, 0.45])

    @pytest.mark.parametrize("K,eps", [(2, 0.0), (5, 0.3), (20, 0.05)])
    def test_row_sums_uniform(self, K, eps):
        spec = make_diagonal(K, eps)
        assert spec.probs.sum(axis=1) == pytest.approx([1.0 / K] * K)

    def test_invalid(self):
        with pytest.raises(DataError):
            make_diagonal(1, 0.0)
        with pytest.raises(DataError):
            make_diagonal(3, 1.0)


class TestMakeBlock:
    def test_two_blocks_eps_zero(self):
        spec = make_block(4, 2, 0.0)
        expected = np.where(
            np.add.outer([0, 0, 1, 1], [0, 0, -1, -1]) % 2 == 0, 0.125, 0.0
        )
        assert np.allclose(spec.probs, expected)

    def test_block_pmi_against_brute_force(self):
        # brute-force evaluation of log p / (px py) on every cell
        spec = make_block(20, 4, 0.05)
        px = spec.probs.sum(axis=1)
        py = spec.probs.sum(axis=0)
        for i, j in [(0, 0), (0, 3), (0, 19), (7, 5), (13, 13)]:
            expected = math.log(spec.probs[i, j] / (px[i] * py[j]))
            assert analytic_pmi(spec, i, j) == pytest.approx(expected, abs=1e-12)

    def test_eps_one_edge(self):
        spec = make_block(4, 2, 1.0)
        assert spec.probs[0, 0] == 0.0
        assert spec.probs[0, 2] == pytest.approx(1.0 / 8)
        # marginals stay uniform (brute-force summation)
        assert spec.ctx_marginal() == pytest.approx([0.25] * 4)
        assert spec.resp_marginal() == pytest.approx([0.25] * 4)

    def test_indivisible_rejected(self):
        with pytest.raises(DataError):
            make_block(10, 3, 0.1)


class TestMakeIndependent:
    def test_uniform_cells(self):
        spec = make_independent(3)
        assert np.allclose(spec.probs, 1.0 / 9)

    def test_pmi_is_zero_everywhere(self):
        spec = make_independent(4)
        for i, j in itertools.product(range(4), repeat=2):
            assert analytic_pmi(spec, i, j) == pytest.approx(0.0, abs=1e-12)

    def test_uniform_marginals(self):
        spec = make_independent(5)
        assert spec.ctx_marginal() == pytest.approx([0.2] * 5)

    def test_dirichlet_variant_still_zero_pmi(self):
        spec = make_independent(4, dirichlet_alpha=1.0, rng=seeded_rng(5))
        table = pmi_table(spec)
        assert np.abs(table).max() < 1e-10
        assert spec.ctx_marginal() != pytest.approx([0.25] * 4)


class TestAnalyticPmi:
    def test_diagonal_hand_values(self):
        spec = make_diagonal(2, 0.1)
        assert analytic_pmi(spec, 0, 0) == pytest.approx(math.log(1.8), abs=1e-12)
        assert analytic_pmi(spec, 0, 0) == pytest.approx(0.5878, abs=1e-4)
        assert analytic_pmi(spec, 0, 1) == pytest.approx(math.log(0.2), abs=1e-12)
        assert analytic_pmi(spec, 0, 1) == pytest.approx(-1.6094, abs=1e-4)

    def test_zero_cell_errors(self):
        spec = make_diagonal(2, 0.0)
        with pytest.raises(DataError, match="undefined"):
            analytic_pmi(spec, 0, 1)

    def test_symmetry_under_transpose(self):
        spec = make_block(6, 2, 0.2)
        transposed = JointSpec(6, 6, spec.probs.T.copy(), spec.family)
        for i, j in [(0, 1), (2, 5), (4, 4)]:
            assert analytic_pmi(spec, i, j) == pytest.approx(
                analytic_pmi(transposed, j, i), abs=1e-12
            )

    @pytest.mark.parametrize(
        "spec_fn",
        [
            lambda: make_diagonal(5, 0.2),
            lambda: make_block(8, 2, 0.15),
            lambda: make_independent(6),
        ],
    )
    def test_expected_pmi_is_nonnegative(self, spec_fn):
        # expectation of PMI is the mutual information, which is >= 0
        spec = spec_fn()
        assert mutual_information(spec) >= -1e-12

    def test_chain_rule_on_enumerated_triple(self):
        # brute-force check of pmi(x,y;z) = pmi(x;z) + pmi(y;z|x)
        # over a random 4x4x4 joint distribution
        rng = seeded_rng(11)
        p = rng.uniform(0.1, 1.0, size=(4, 4, 4))
        p /= p.sum()
        px = p.sum(axis=(1, 2))
        pz = p.sum(axis=(0, 1))
        pxy = p.sum(axis=2)
        pxz = p.sum(axis=1)
        for x, y, z in itertools.product(range(4), repeat=3):
            pmi_xy_z = math.log(p[x, y, z] / (pxy[x, y] * pz[z]))
            pmi_x_z = math.log(pxz[x, z] / (px[x] * pz[z]))
            # conditional pmi(y;z|x) = log p(y,z|x) / (p(y|x) p(z|x))
            p_yz_given_x = p[x, y, z] / px[x]
            p_y_given_x = pxy[x, y] / px[x]
            p_z_given_x = pxz[x, z] / px[x]
            pmi_y_z_given_x = math.log(p_yz_given_x / (p_y_given_x * p_z_given_x))
            assert pmi_xy_z == pytest.approx(pmi_x_z + pmi_y_z_given_x, abs=1e-10)


class TestSamplePairs:
    def test_diagonal_eps_zero_only_diagonal(self):
        spec = make_diagonal(4, 0.0)
        pairs = sample_pairs(spec, 500, seeded_rng(0))
        assert all(i == j for i, j in pairs)

    def test_frequencies_converge(self):
        # Chernoff-style bound: each cell within 0.01 of 0.25 at n = 1e5
        spec = make_independent(2)
        pairs = sample_pairs(spec, 100_000, seeded_rng(1))
        counts = np.zeros((2, 2))
        for i, j in pairs:
            counts[i, j] += 1
        assert np.abs(counts / 100_000 - 0.25).max() < 0.01

    def test_same_seed_same_samples(self):
        spec = make_block(6, 3, 0.1)
        assert sample_pairs(spec, 50, seeded_rng(9)) == sample_pairs(
            spec, 50, seeded_rng(9)
        )


class TestEmbedding:
    def test_onehot_noiseless(self):
        spec = make_diagonal(2, 0.1)
        cfg = SyntheticEmbedConfig(noise_sigma=0.0, mode="onehot_concat")
        pair = embed_synthetic(spec, 0, 1, cfg, seeded_rng(0))
        assert pair.vector.tolist() == [1.0, 0.0, 0.0, 1.0]
        assert pair.target_pmi == pytest.approx(math.log(0.2))

    def test_noiseless_embeddings_identical(self):
        spec = make_diagonal(3, 0.1)
        cfg = SyntheticEmbedConfig(noise_sigma=0.0)
        a = embed_synthetic(spec, 1, 2, cfg, seeded_rng(0)).vector
        b = embed_synthetic(spec, 1, 2, cfg, seeded_rng(99)).vector
        assert np.array_equal(a, b)

    def test_gaussian_prototype_tables_stable(self):
        spec = make_diagonal(4, 0.1)
        cfg = SyntheticEmbedConfig(mode="gaussian_prototypes", proto_dim=8, seed=5)
        e1 = SyntheticEmbedder(spec, cfg)
        e2 = SyntheticEmbedder(spec, cfg)
        v1 = e1.vector(2, 3, seeded_rng(0))
        v2 = e2.vector(2, 3, seeded_rng(0))
        assert np.array_equal(v1, v2)
        assert v1.shape == (8,)

    def test_noise_comes_from_caller_stream(self):
        spec = make_diagonal(2, 0.1)
        cfg = SyntheticEmbedConfig(noise_sigma=0.5)
        emb = SyntheticEmbedder(spec, cfg)
        a = emb.vector(0, 0, seeded_rng(3))
        b = emb.vector(0, 0, seeded_rng(3))
        c = emb.vector(0, 0, seeded_rng(4))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_out_of_bounds_rejected(self):
        spec = make_diagonal(2, 0.1)
        cfg = SyntheticEmbedConfig()
        with pytest.raises(DataError):
            embed_synthetic(spec, 0, 5, cfg, seeded_rng(0))


class TestJointSpecValidation:
    def test_negative_prob_rejected(self):
        probs = np.array([[0.6, -0.1], [0.3, 0.2]])
        with pytest.raises(DataError):
            JointSpec(2, 2, probs, "diagonal")

    def test_bad_sum_rejected(self):
        with pytest.raises(DataError):
            JointSpec(2, 2, np.full((2, 2), 0.3), "diagonal")

    def test_zero_marginal_rejected(self):
        probs = np.array([[0.5, 0.5], [0.0, 0.0]])
        with pytest.raises(DataError):
            JointSpec(2, 2, probs, "diagonal")
