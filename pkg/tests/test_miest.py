"""Variational estimator: likelihood formula oracle, both losses against
scalar recomputation, gradient partition, sampling unbiasedness, clamping."""

import numpy as np
import pytest
import torch

from silentvc.miest import (
    EstimatorSnapshot,
    MiEstimator,
    e_step_loss,
    gaussian_loglik,
    mi_upper_bound,
)


def make_estimator(width=4, hidden=8, seed=0) -> MiEstimator:
    torch.manual_seed(seed)
    return MiEstimator(width, hidden)


def random_batch(n, width, t_range=(2, 6), seed=0, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    facial = torch.tensor(rng.standard_normal((n, width)), dtype=dtype)
    contents = [
        torch.tensor(rng.standard_normal((int(rng.integers(*t_range)), width)),
                     dtype=dtype)
        for _ in range(n)
    ]
    return facial, contents


class TestLoglik:
    def test_zero_residual_unit_variance(self):
        mu = torch.randn(5)
        assert float(gaussian_loglik(mu.clone(), mu, torch.zeros(5))) == 0.0

    def test_unit_residual_single_dim(self):
        mu = torch.zeros(3)
        value = torch.tensor([1.0, 0.0, 0.0])
        assert float(gaussian_loglik(value, mu, torch.zeros(3))) == pytest.approx(-0.5)

    def test_scalar_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            d = int(rng.integers(1, 8))
            value = rng.standard_normal(d)
            mu = rng.standard_normal(d)
            logvar = rng.uniform(-2, 2, size=d)
            want = sum(
                0.5 * (-(value[i] - mu[i]) ** 2 / np.exp(logvar[i]) - logvar[i])
                for i in range(d))
            got = float(gaussian_loglik(
                torch.tensor(value), torch.tensor(mu), torch.tensor(logvar)))
            assert got == pytest.approx(want, abs=1e-12)

    def test_estimator_loglik_composes_forward(self):
        est = make_estimator().double()
        facial, contents = random_batch(1, 4, seed=1)
        with torch.no_grad():
            mu, logvar = est(contents[0])
            want = float(gaussian_loglik(facial[0], mu, logvar))
            got = float(est.loglik(facial[0], contents[0]))
        assert got == pytest.approx(want, abs=1e-12)

    def test_shape_errors(self):
        est = make_estimator()
        with pytest.raises(ValueError):
            est(torch.randn(3, 5))  # wrong width
        with pytest.raises(ValueError):
            est(torch.randn(0, 4))
        with pytest.raises(ValueError):
            gaussian_loglik(torch.randn(3), torch.randn(4), torch.randn(4))

    def test_logvar_clamped(self):
        est = make_estimator()
        with torch.no_grad():
            est.logvar_head[-1].weight.mul_(0).add_(100.0)
            est.logvar_head[-1].bias.fill_(1e4)
            _, logvar = est(torch.randn(3, 4))
            assert float(logvar.max()) <= 8.0
            est.logvar_head[-1].bias.fill_(-1e4)
            _, logvar = est(torch.randn(3, 4))
            assert float(logvar.min()) >= -8.0

    def test_bad_construction(self):
        with pytest.raises(ValueError):
            MiEstimator(0, 8)
        with pytest.raises(ValueError):
            MiEstimator(4, 8, logvar_range=(2.0, 2.0))


class TestEStep:
    def test_single_pair_definition(self):
        est = make_estimator().double()
        facial, contents = random_batch(1, 4, seed=2)
        with torch.no_grad():
            want = -float(est.loglik(facial[0], contents[0]))
        assert e_step_loss(est, facial, contents).item() == pytest.approx(want, abs=1e-12)

    def test_two_pairs_average(self):
        est = make_estimator().double()
        facial, contents = random_batch(2, 4, seed=3)
        with torch.no_grad():
            a = float(est.loglik(facial[0], contents[0]))
            b = float(est.loglik(facial[1], contents[1]))
        got = e_step_loss(est, facial, contents).item()
        assert got == pytest.approx(-(a + b) / 2, abs=1e-12)

    def test_scalar_oracle_random_batches(self):
        est = make_estimator().double()
        for seed in range(5):
            n = 1 + seed
            facial, contents = random_batch(n, 4, seed=10 + seed)
            with torch.no_grad():
                want = -np.mean([
                    float(est.loglik(facial[i], contents[i]))
                    for i in range(n)])
            assert e_step_loss(est, facial, contents).item() == pytest.approx(
                want, abs=1e-12)

    def test_gradients_reach_only_theta(self):
        est = make_estimator().double()
        facial, contents = random_batch(3, 4, seed=4)
        facial.requires_grad_(True)
        contents = [c.requires_grad_(True) for c in contents]
        e_step_loss(est, facial, contents).scalar.backward()
        assert facial.grad is None
        assert all(c.grad is None for c in contents)
        theta_grads = [p.grad for p in est.parameters()]
        assert all(g is not None for g in theta_grads)
        assert sum(float(g.abs().sum()) for g in theta_grads) > 0

    def test_empty_batch_rejected(self):
        est = make_estimator()
        with pytest.raises(ValueError):
            e_step_loss(est, torch.zeros(0, 4), [])


class TestMiBound:
    def test_forced_self_pairing_is_exactly_zero(self):
        est = make_estimator().double()
        facial, contents = random_batch(4, 4, seed=5)
        lv = mi_upper_bound(est, facial, contents,
                            neg_indices=torch.arange(4))
        assert lv.item() == 0.0

    def test_two_pair_enumeration(self):
        # Hand-compute from the four (facial, content) loglik combinations.
        est = make_estimator().double()
        facial, contents = random_batch(2, 4, seed=6)
        ll = {}
        with torch.no_grad():
            for i in range(2):
                mu, logvar = est(contents[i])
                for j in range(2):
                    ll[(j, i)] = float(gaussian_loglik(facial[j], mu, logvar))
        for negs, want in [
            ([1, 0], 0.5 * ((ll[(0, 0)] - ll[(1, 0)]) + (ll[(1, 1)] - ll[(0, 1)]))),
            ([0, 0], 0.5 * ((ll[(0, 0)] - ll[(0, 0)]) + (ll[(1, 1)] - ll[(0, 1)]))),
            ([1, 1], 0.5 * ((ll[(0, 0)] - ll[(1, 0)]) + (ll[(1, 1)] - ll[(1, 1)]))),
        ]:
            got = mi_upper_bound(est, facial, contents,
                                 neg_indices=torch.tensor(negs)).item()
            assert got == pytest.approx(want, abs=1e-12), f"negs={negs}"

    def test_rng_average_matches_all_pairs_oracle(self):
        est = make_estimator(seed=7).double()
        facial, contents = random_batch(4, 4, t_range=(2, 4), seed=7)
        oracle = EstimatorSnapshot(est).bound_all_pairs(facial, contents)
        gen = torch.Generator().manual_seed(0)
        draws = np.array([
            mi_upper_bound(est, facial, contents, generator=gen).item()
            for _ in range(800)
        ])
        sem = draws.std(ddof=1) / np.sqrt(len(draws))
        assert abs(draws.mean() - oracle) < 5 * sem + 1e-9, (
            f"mean {draws.mean():.4f} vs oracle {oracle:.4f} (sem {sem:.4f})")

    def test_gradients_reach_only_embeddings(self):
        est = make_estimator().double()
        facial, contents = random_batch(3, 4, seed=8)
        facial.requires_grad_(True)
        contents = [c.requires_grad_(True) for c in contents]
        lv = mi_upper_bound(est, facial, contents,
                            neg_indices=torch.tensor([1, 2, 0]))
        lv.scalar.backward()
        assert all(p.grad is None for p in est.parameters())
        assert facial.grad is not None and float(facial.grad.abs().sum()) > 0
        assert all(c.grad is not None for c in contents)

    def test_grad_matches_finite_differences(self):
        est = make_estimator().double()
        facial, contents = random_batch(3, 4, seed=9)
        negs = torch.tensor([2, 0, 1])
        facial.requires_grad_(True)
        mi_upper_bound(est, facial, contents, neg_indices=negs).scalar.backward()
        fd = torch.zeros_like(facial)
        eps = 1e-6
        base = facial.detach().clone()
        for i in range(3):
            for j in range(4):
                hi = base.clone(); hi[i, j] += eps
                lo = base.clone(); lo[i, j] -= eps
                fd[i, j] = (
                    mi_upper_bound(est, hi, contents, neg_indices=negs).item()
                    - mi_upper_bound(est, lo, contents, neg_indices=negs).item()
                ) / (2 * eps)
        rel = (facial.grad - fd).norm() / fd.norm()
        assert rel < 1e-3, f"relative error {rel:.2e}"

    def test_components_expose_both_terms(self):
        est = make_estimator().double()
        facial, contents = random_batch(3, 4, seed=10)
        lv = mi_upper_bound(est, facial, contents, neg_indices=torch.tensor([0, 0, 0]))
        pos = float(lv.components["positive"])
        neg = float(lv.components["negative"])
        assert lv.item() == pytest.approx(pos - neg, abs=1e-12)

    def test_bad_neg_indices(self):
        est = make_estimator().double()
        facial, contents = random_batch(2, 4, seed=11)
        with pytest.raises(ValueError):
            mi_upper_bound(est, facial, contents, neg_indices=torch.tensor([0, 5]))
        with pytest.raises(ValueError):
            mi_upper_bound(est, facial, contents, neg_indices=torch.tensor([0]))

    def test_generator_reproducible(self):
        est = make_estimator().double()
        facial, contents = random_batch(5, 4, seed=12)
        a = mi_upper_bound(est, facial, contents,
                           generator=torch.Generator().manual_seed(3)).item()
        b = mi_upper_bound(est, facial, contents,
                           generator=torch.Generator().manual_seed(3)).item()
        assert a == b
