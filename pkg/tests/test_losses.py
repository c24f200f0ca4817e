import math

import numpy as np
import pytest
import torch

from changekit.errors import InputError, ParameterError, ShapeError
from changekit.losses import (ContrastiveBatch, batch_contrastive_loss,
                              codebook_loss, contrastive_loss, cosine_distance,
                              distill_total, pretrain_total, uncertainty_loss)
from changekit.selfcheck import gradient_relative_error


def _unit(*rows):
    t = torch.tensor(rows, dtype=torch.float64)
    return t / t.norm(dim=-1, keepdim=True)


E1 = _unit([1.0, 0.0])
E2 = _unit([0.0, 1.0])


class TestContrastive:
    def test_no_negatives_is_zero(self):
        loss = contrastive_loss(ContrastiveBatch(E1, E1, torch.empty(0, 2), 1.0))
        assert abs(loss.item()) < 1e-12

    def test_identical_positive_one_orthogonal_negative(self):
        loss = contrastive_loss(ContrastiveBatch(E1, E1, E2, 1.0))
        assert abs(loss.item() - math.log(1 + math.exp(-1))) <= 1e-6

    def test_orthogonal_positive_one_identical_negative(self):
        loss = contrastive_loss(ContrastiveBatch(E1, E2, E1, 1.0))
        assert abs(loss.item() - math.log(1 + math.e)) <= 1e-6

    def test_rejects_unnormalized_rows(self):
        bad = torch.tensor([[2.0, 0.0]], dtype=torch.float64)
        with pytest.raises(InputError):
            contrastive_loss(ContrastiveBatch(bad, E1, E2, 1.0))
        with pytest.raises(InputError):
            contrastive_loss(ContrastiveBatch(E1, E1, bad, 1.0))

    def test_rejects_bad_temperature(self):
        with pytest.raises(ParameterError):
            contrastive_loss(ContrastiveBatch(E1, E1, E2, 0.0))

    def test_negative_pool_permutation_invariance(self):
        torch.manual_seed(0)
        a = _unit(*np.random.default_rng(0).normal(size=(3, 6)))
        p = _unit(*np.random.default_rng(1).normal(size=(3, 6)))
        n = _unit(*np.random.default_rng(2).normal(size=(7, 6)))
        base = contrastive_loss(ContrastiveBatch(a, p, n, 0.3)).item()
        for seed in range(5):
            perm = np.random.default_rng(seed).permutation(7)
            shuffled = contrastive_loss(
                ContrastiveBatch(a, p, n[perm.tolist()], 0.3)).item()
            assert abs(shuffled - base) < 1e-12

    def test_monotone_in_positive_cosine(self):
        negatives = _unit([0.3, 0.7], [-0.5, 0.4])
        values = []
        for cos in np.linspace(-0.95, 0.95, 15):
            pos = torch.tensor([[cos, math.sqrt(1 - cos ** 2)]], dtype=torch.float64)
            values.append(contrastive_loss(
                ContrastiveBatch(E1, pos, negatives, 0.2)).item())
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        anchors = _unit(*rng.normal(size=(3, 4)))
        positives = _unit(*rng.normal(size=(3, 4)))
        negatives = _unit(*rng.normal(size=(5, 4)))

        def wrt(which):
            def fn(x):
                x = torch.nn.functional.normalize(x, dim=-1)
                parts = {"a": anchors, "p": positives, "n": negatives}
                parts[which] = x
                return contrastive_loss(ContrastiveBatch(
                    parts["a"], parts["p"], parts["n"], 0.5))
            return fn

        assert gradient_relative_error(wrt("a"), anchors) <= 1e-3
        assert gradient_relative_error(wrt("p"), positives) <= 1e-3
        assert gradient_relative_error(wrt("n"), negatives) <= 1e-3

    def test_batch_form_matches_explicit_pools(self):
        rng = np.random.default_rng(4)
        a = _unit(*rng.normal(size=(4, 5)))
        p = _unit(*rng.normal(size=(4, 5)))
        dense = batch_contrastive_loss(a, p, None, 0.4).item()
        per_anchor = []
        for i in range(4):
            pool = torch.cat([p[:i], p[i + 1:]])
            per_anchor.append(contrastive_loss(ContrastiveBatch(
                a[i:i + 1], p[i:i + 1], pool, 0.4)).item())
        assert abs(dense - np.mean(per_anchor)) < 1e-10


class TestCodebook:
    def test_one_hot_is_zero(self):
        p = torch.zeros(8, dtype=torch.float64)
        p[3] = 1.0
        assert codebook_loss(p).item() == 0.0

    def test_uniform_small(self):
        p = torch.full((4,), 0.25, dtype=torch.float64)
        assert abs(codebook_loss(p).item() - 0.25 * math.log(0.25)) <= 1e-12
        assert abs(codebook_loss(p).item() + 0.34657) <= 1e-5

    def test_uniform_large(self):
        p = torch.full((1024,), 1 / 1024, dtype=torch.float64)
        assert abs(codebook_loss(p).item() + math.log(1024) / 1024) <= 1e-9

    def test_rejects_invalid_histograms(self):
        with pytest.raises(InputError):
            codebook_loss(torch.tensor([0.5, -0.1, 0.6], dtype=torch.float64))
        with pytest.raises(InputError):
            codebook_loss(torch.tensor([0.7, 0.7], dtype=torch.float64))

    def test_uniform_is_the_minimizer(self):
        v = 16
        uniform = codebook_loss(torch.full((v,), 1 / v, dtype=torch.float64)).item()
        rng = np.random.default_rng(5)
        for _ in range(10_000):
            p = rng.dirichlet(np.full(v, rng.uniform(0.2, 5.0)))
            assert uniform <= codebook_loss(torch.from_numpy(p)).item() + 1e-12

    def test_gradient_matches_finite_differences(self):
        p = torch.from_numpy(np.random.default_rng(6).dirichlet(np.ones(8)))
        assert gradient_relative_error(codebook_loss, p, h=1e-7) <= 1e-3


class TestPretrainTotal:
    def test_values(self):
        total = pretrain_total(torch.tensor(0.5, dtype=torch.float64),
                               torch.tensor(-0.3, dtype=torch.float64))
        assert abs(total.item() - 0.2) < 1e-12
        assert pretrain_total(torch.tensor(0.0), torch.tensor(0.0)).item() == 0.0

    def test_gradient_of_sum_is_sum_of_gradients(self):
        p0 = torch.from_numpy(np.random.default_rng(7).dirichlet(np.ones(6)))

        def composed(p):
            return pretrain_total(torch.tensor(1.25, dtype=torch.float64),
                                  codebook_loss(p))

        assert gradient_relative_error(composed, p0, h=1e-7) <= 1e-3


class TestUncertainty:
    def test_zero_distance_zero_logvar(self):
        y = torch.zeros(2, 3, 3, dtype=torch.float64)
        y[0] = 1.0
        s = torch.zeros(3, 3, dtype=torch.float64)
        assert uncertainty_loss(y, y.clone(), s).item() == 0.0

    def test_unit_distance_zero_logvar(self):
        y = torch.zeros(2, 3, 3, dtype=torch.float64)
        y[0] = 1.0
        mu = torch.zeros(2, 3, 3, dtype=torch.float64)
        mu[1] = 1.0  # orthogonal everywhere -> d = 1
        s = torch.zeros(3, 3, dtype=torch.float64)
        assert abs(uncertainty_loss(y, mu, s).item() - 0.5) <= 1e-9

    def test_grid_search_minimum_in_logvar(self):
        y = torch.zeros(2, 1, 1, dtype=torch.float64)
        y[0] = 1.0
        mu = torch.zeros(2, 1, 1, dtype=torch.float64)
        mu[1] = 1.0
        grid = np.arange(-5.0, 5.0, 0.01)
        losses = [uncertainty_loss(y, mu, torch.full((1, 1), s,
                                                     dtype=torch.float64)).item()
                  for s in grid]
        best = int(np.argmin(losses))
        assert abs(grid[best]) <= 0.011          # analytic optimum ln(1) = 0
        assert abs(losses[best] - 0.5) <= 1e-4

    def test_convex_in_logvar(self):
        y = torch.zeros(2, 1, 1, dtype=torch.float64)
        y[0] = 1.0
        mu = _unit([0.6, 0.8]).reshape(2, 1, 1)
        grid = np.linspace(-4, 4, 161)
        vals = [uncertainty_loss(y, mu, torch.full((1, 1), s,
                                                   dtype=torch.float64)).item()
                for s in grid]
        second = np.diff(vals, 2)
        assert (second >= -1e-9).all()

    def test_shape_mismatch_rejected(self):
        y = torch.zeros(2, 3, 3, dtype=torch.float64)
        with pytest.raises(ShapeError):
            uncertainty_loss(y, torch.zeros(2, 4, 4, dtype=torch.float64),
                             torch.zeros(3, 3, dtype=torch.float64))
        with pytest.raises(ShapeError):
            uncertainty_loss(y, y.clone(), torch.zeros(2, 2, dtype=torch.float64))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(8)
        y = torch.nn.functional.normalize(
            torch.from_numpy(rng.normal(size=(4, 4, 4))), dim=0)
        mu = torch.from_numpy(rng.normal(size=(4, 4, 4)))
        s = torch.from_numpy(rng.normal(size=(4, 4)) * 0.5)
        assert gradient_relative_error(
            lambda m: uncertainty_loss(y, m, s), mu) <= 1e-3
        assert gradient_relative_error(
            lambda sv: uncertainty_loss(y, mu, sv), s) <= 1e-3


class TestDistillTotal:
    def test_all_equal_is_zero(self):
        y = torch.zeros(3, 2, 2, dtype=torch.float64)
        y[0] = 1.0
        s = torch.zeros(2, 2, dtype=torch.float64)
        assert distill_total(y, y.clone(), s, y, y.clone(), lam=1.0).item() == 0.0

    def test_lambda_zero_equals_uncertainty_loss(self):
        rng = np.random.default_rng(9)
        y = torch.nn.functional.normalize(
            torch.from_numpy(rng.normal(size=(3, 4, 4))), dim=0)
        mu = torch.from_numpy(rng.normal(size=(3, 4, 4)))
        mu_same = torch.from_numpy(rng.normal(size=(3, 4, 4)))
        s = torch.from_numpy(rng.normal(size=(4, 4)))
        a = distill_total(y, mu, s, y, mu_same, lam=0.0).item()
        b = uncertainty_loss(y, mu, s).item()
        assert a == b

    def test_known_value(self):
        y = torch.zeros(2, 2, 2, dtype=torch.float64)
        y[0] = 1.0
        mu = torch.zeros(2, 2, 2, dtype=torch.float64)
        mu[1] = 1.0  # cross-time distance 1
        s = torch.zeros(2, 2, dtype=torch.float64)
        total = distill_total(y, mu, s, y, mu.clone(), lam=1.0)
        assert abs(total.item() - 1.5) <= 1e-9

    def test_negative_lambda_rejected(self):
        y = torch.zeros(2, 2, 2, dtype=torch.float64)
        with pytest.raises(ParameterError):
            distill_total(y, y, torch.zeros(2, 2, dtype=torch.float64), y, y,
                          lam=-0.5)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(10)
        y = torch.nn.functional.normalize(
            torch.from_numpy(rng.normal(size=(4, 4, 4))), dim=0)
        mu = torch.from_numpy(rng.normal(size=(4, 4, 4)))
        mu_same = torch.from_numpy(rng.normal(size=(4, 4, 4)))
        s = torch.from_numpy(rng.normal(size=(4, 4)) * 0.3)
        assert gradient_relative_error(
            lambda m: distill_total(y, m, s, y, mu_same, 1.0), mu) <= 1e-3
        assert gradient_relative_error(
            lambda m: distill_total(y, mu, s, y, m, 1.0), mu_same) <= 1e-3
        assert gradient_relative_error(
            lambda sv: distill_total(y, mu, sv, y, mu_same, 1.0), s) <= 1e-3


def test_cosine_distance_zero_vector_scores_one():
    x = torch.zeros(3, 2, 2)
    y = torch.ones(3, 2, 2)
    d = cosine_distance(x, y, dim=0)
    assert torch.allclose(d, torch.ones(2, 2))


def test_distill_total_same_time_shape_check():
    y = torch.zeros(2, 3, 3, dtype=torch.float64)
    y[0] = 1.0
    s = torch.zeros(3, 3, dtype=torch.float64)
    with pytest.raises(ShapeError):
        distill_total(y, y.clone(), s, y, torch.zeros(2, 4, 4), lam=1.0)
