"""Loss oracles: scalar-loop recomputation of both losses, the documented
trivial cases, symmetry/invariance properties, and finite-difference grads."""

import math

import numpy as np
import pytest
import torch

from silentvc.errors import NumericError
from silentvc.losses import (
    LossValue,
    afclip_loss,
    afclip_lower_bound,
    reconstruction_loss,
)


def afclip_oracle(audio: np.ndarray, facial: np.ndarray,
                  temperature: float = 1.0) -> float:
    """Pure-python scalar recomputation of the bidirectional loss."""
    n = audio.shape[0]
    cos = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            na = math.sqrt(sum(x * x for x in audio[i]))
            nf = math.sqrt(sum(x * x for x in facial[j]))
            cos[i, j] = sum(a * f for a, f in zip(audio[i], facial[j])) / (na * nf)
    a2v = 0.0
    v2a = 0.0
    for i in range(n):
        denom = sum(math.exp(cos[i, j] / temperature) for j in range(n))
        a2v += -math.log(math.exp(cos[i, i] / temperature) / denom)
        denom = sum(math.exp(cos[j, i] / temperature) for j in range(n))
        v2a += -math.log(math.exp(cos[i, i] / temperature) / denom)
    return 0.5 * (a2v / n + v2a / n)


class TestReconstruction:
    def test_identity_is_zero(self):
        s = torch.randn(6, 9)
        assert reconstruction_loss(s, s).item() == 0.0

    def test_constant_offset(self):
        s = torch.randn(6, 9)
        assert reconstruction_loss(s + 1, s).item() == pytest.approx(1.0, rel=1e-6)

    def test_scalar_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = rng.standard_normal((3, 4))
            b = rng.standard_normal((3, 4))
            want = sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / 12
            got = reconstruction_loss(torch.tensor(a), torch.tensor(b)).item()
            assert got == pytest.approx(want, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            reconstruction_loss(torch.randn(3, 4), torch.randn(4, 3))

    def test_loss_value_components(self):
        lv = reconstruction_loss(torch.ones(2, 2), torch.zeros(2, 2))
        assert isinstance(lv, LossValue)
        assert set(lv.components) == {"l1"}
        assert float(lv.components["l1"]) == lv.item() == 1.0


class TestAfClip:
    def test_single_pair_is_zero(self):
        a = torch.tensor([[1.0, 2.0, 3.0]])
        f = torch.tensor([[0.5, -1.0, 2.0]])
        assert afclip_loss(a, f).item() == pytest.approx(0.0, abs=1e-7)

    def test_identity_cosine_matrix(self):
        # Orthonormal pairs give the identity cosine matrix; each direction
        # is -log(e / (e + 1)).
        a = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        lv = afclip_loss(a, a.clone())
        want = -math.log(math.e / (math.e + 1.0))
        assert lv.item() == pytest.approx(want, abs=1e-6)
        assert float(lv.components["a2v"]) == pytest.approx(want, abs=1e-6)
        assert float(lv.components["v2a"]) == pytest.approx(want, abs=1e-6)

    def test_scalar_loop_oracle(self):
        rng = np.random.default_rng(1)
        for trial in range(30):
            n = int(rng.integers(1, 5))
            d = int(rng.integers(2, 9))
            a = rng.standard_normal((n, d))
            f = rng.standard_normal((n, d))
            got = afclip_loss(torch.tensor(a), torch.tensor(f)).item()
            assert got == pytest.approx(afclip_oracle(a, f), abs=1e-12), f"trial {trial}"

    def test_temperature_matches_oracle(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((3, 5))
        f = rng.standard_normal((3, 5))
        for tau in (0.1, 0.5, 2.0):
            got = afclip_loss(torch.tensor(a), torch.tensor(f), temperature=tau).item()
            assert got == pytest.approx(afclip_oracle(a, f, tau), abs=1e-12)
        with pytest.raises(ValueError):
            afclip_loss(torch.tensor(a), torch.tensor(f), temperature=0.0)

    def test_role_swap_symmetry(self):
        rng = np.random.default_rng(3)
        a = torch.tensor(rng.standard_normal((4, 6)))
        f = torch.tensor(rng.standard_normal((4, 6)))
        assert afclip_loss(a, f).item() == pytest.approx(
            afclip_loss(f, a).item(), abs=1e-12)

    def test_joint_permutation_invariance(self):
        rng = np.random.default_rng(4)
        a = torch.tensor(rng.standard_normal((5, 4)))
        f = torch.tensor(rng.standard_normal((5, 4)))
        base = afclip_loss(a, f).item()
        for seed in range(5):
            perm = torch.randperm(5, generator=torch.Generator().manual_seed(seed))
            assert afclip_loss(a[perm], f[perm]).item() == pytest.approx(base, abs=1e-12)

    def test_row_rescaling_invariance(self):
        rng = np.random.default_rng(5)
        a = torch.tensor(rng.standard_normal((4, 6)))
        f = torch.tensor(rng.standard_normal((4, 6)))
        base = afclip_loss(a, f).item()
        scales_a = torch.tensor(rng.uniform(0.1, 10.0, size=(4, 1)))
        scales_f = torch.tensor(rng.uniform(0.1, 10.0, size=(4, 1)))
        got = afclip_loss(a * scales_a, f * scales_f).item()
        assert got == pytest.approx(base, abs=1e-9)

    def test_zero_norm_rejected_with_row(self):
        a = torch.tensor([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
        f = torch.randn(3, 2).double()
        with pytest.raises(NumericError, match=r"\[1\]"):
            afclip_loss(a.double(), f)
        with pytest.raises(NumericError, match="facial"):
            afclip_loss(f, a.double())

    def test_lower_bound_attained_and_respected(self):
        # The infimum for N=2 is hit by perfectly aligned positives and
        # anti-aligned negatives.
        u = torch.tensor([[1.0, 0.0], [-1.0, 0.0]]).double()
        lv = afclip_loss(u, u.clone())
        assert lv.item() == pytest.approx(afclip_lower_bound(2), abs=1e-12)
        rng = np.random.default_rng(6)
        for _ in range(50):
            n = int(rng.integers(2, 5))
            a = torch.tensor(rng.standard_normal((n, 6)))
            f = torch.tensor(rng.standard_normal((n, 6)))
            assert afclip_loss(a, f).item() >= afclip_lower_bound(n) - 1e-12

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            afclip_loss(torch.randn(3, 4), torch.randn(4, 4))
        with pytest.raises(ValueError):
            afclip_loss(torch.randn(0, 4), torch.randn(0, 4))

    def test_components_recombine(self):
        rng = np.random.default_rng(7)
        a = torch.tensor(rng.standard_normal((3, 4)))
        f = torch.tensor(rng.standard_normal((3, 4)))
        lv = afclip_loss(a, f)
        recombined = 0.5 * (float(lv.components["a2v"]) + float(lv.components["v2a"]))
        assert lv.item() == pytest.approx(recombined, abs=1e-12)


def central_diff_grad(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Entrywise central differences of a scalar function, in double."""
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + eps
        hi = fn(x)
        flat[i] = orig - eps
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


class TestGradients:
    def test_reconstruction_grad_matches_fd(self):
        torch.manual_seed(0)
        pred = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        target = torch.randn(3, 4, dtype=torch.float64)
        reconstruction_loss(pred, target).scalar.backward()
        fd = central_diff_grad(
            lambda x: float(reconstruction_loss(x, target).scalar), pred.detach().clone())
        rel = (pred.grad - fd).norm() / fd.norm()
        assert rel < 1e-3

    def test_afclip_grad_matches_fd_both_sides(self):
        torch.manual_seed(1)
        for n, d in [(2, 3), (3, 5), (4, 8)]:
            a = torch.randn(n, d, dtype=torch.float64, requires_grad=True)
            f = torch.randn(n, d, dtype=torch.float64, requires_grad=True)
            afclip_loss(a, f).scalar.backward()
            fd_a = central_diff_grad(
                lambda x: float(afclip_loss(x, f.detach()).scalar), a.detach().clone())
            fd_f = central_diff_grad(
                lambda x: float(afclip_loss(a.detach(), x).scalar), f.detach().clone())
            rel_a = (a.grad - fd_a).norm() / fd_a.norm()
            rel_f = (f.grad - fd_f).norm() / fd_f.norm()
            assert rel_a < 1e-3 and rel_f < 1e-3, f"N={n} d={d}: {rel_a:.2e}, {rel_f:.2e}"
