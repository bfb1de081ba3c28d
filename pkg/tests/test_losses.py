import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import multivariate_normal, norm

from bam.errors import DomainError, MissingLabel, ShapeError
from bam.geometry import AtomicStructure
from bam.losses import (
    LossWeights,
    Targets,
    force_nll,
    logdet,
    loss_fn,
    mahalanobis,
    mse_loss,
    nll_e,
    nll_gaussian,
    nll_jef,
    required_head,
    targets,
)

LN2PI = math.log(2 * math.pi)


def random_spd(rng, n=1, scale=1.0):
    A = rng.normal(scale=scale, size=(n, 3, 3))
    return A @ A.transpose(0, 2, 1) + 0.1 * np.eye(3)


def toy(rng, n_structs=3, atoms=(2, 1, 3)):
    n = sum(atoms)
    tgt = Targets(
        energy=torch.as_tensor(rng.normal(size=n_structs)),
        forces=torch.as_tensor(rng.normal(size=(n, 3))),
        atom_struct=torch.as_tensor(np.repeat(np.arange(n_structs), atoms)),
    )
    pred = {
        "energy": torch.as_tensor(rng.normal(size=n_structs)),
        "forces": torch.as_tensor(rng.normal(size=(n, 3))),
        "energy_var": torch.as_tensor(rng.uniform(0.2, 2.0, size=n_structs)),
        "force_cov": torch.as_tensor(random_spd(rng, n)),
    }
    return pred, tgt


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(1e-3, 1e3))
def test_nll_gaussian_matches_scipy(y, mu, var):
    ours = float(nll_gaussian(y, mu, var))
    assert ours + 0.5 * LN2PI == pytest.approx(-norm.logpdf(y, mu, math.sqrt(var)), rel=1e-10, abs=1e-10)


@given(st.floats(0.05, 3), st.floats(0.01, 10))
def test_nll_minimised_at_squared_residual(r, scale):
    v = r * r
    f = lambda var: float(nll_gaussian(r, 0.0, var))
    assert f(v) <= f(v * (1 + 0.1 * scale)) and f(v) <= f(v / (1 + 0.1 * scale))


def test_nll_domain_errors():
    with pytest.raises(DomainError):
        nll_gaussian(0.0, 0.0, 0.0)
    with pytest.raises(DomainError):
        mahalanobis(torch.zeros(3), torch.tensor([[1.0, 2, 0], [0, 1, 0], [0, 0, 1]], dtype=torch.float64))
    with pytest.raises(DomainError):
        logdet(torch.diag(torch.tensor([1.0, -1.0, 1.0], dtype=torch.float64)))
    with pytest.raises(ShapeError):
        logdet(torch.eye(2, dtype=torch.float64))


def test_force_nll_matches_scipy(rng):
    cov = random_spd(rng, 5)
    y, mu = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    ours = force_nll(y, mu, cov).numpy()
    ref = np.array([-2 * multivariate_normal(mu[i], cov[i]).logpdf(y[i]) - 3 * LN2PI for i in range(5)])
    np.testing.assert_allclose(ours, ref, rtol=1e-10)
    np.testing.assert_allclose(logdet(cov).numpy(), np.linalg.slogdet(cov)[1], rtol=1e-12)
    r = y - mu
    np.testing.assert_allclose(mahalanobis(r, cov).numpy(), np.einsum("na,nab,nb->n", r, np.linalg.inv(cov), r), rtol=1e-10)


def test_mse_hand_example():
    tgt = Targets(torch.tensor([1.0, 2.0], dtype=torch.float64), torch.zeros(3, 3, dtype=torch.float64), torch.tensor([0, 1, 1]))
    pred = {"energy": torch.tensor([0.0, 2.5], dtype=torch.float64), "forces": torch.ones(3, 3, dtype=torch.float64)}
    # structure 0: 1 + 3; structure 1: 0.25 + 6
    assert float(mse_loss(pred, tgt)) == pytest.approx((4 + 6.25) / 2)
    assert float(mse_loss(pred, tgt, LossWeights(2.0, 0.5))) == pytest.approx((2 + 1.5 + 0.5 + 3) / 2)


def test_nll_jef_reference_value(rng):
    pred, tgt = toy(rng)
    p = {k: v.numpy() for k, v in pred.items()}
    e, f, a = tgt.energy.numpy(), tgt.forces.numpy(), tgt.atom_struct.numpy()
    per = (e - p["energy"]) ** 2 / p["energy_var"] + np.log(p["energy_var"])
    for i in range(len(a)):
        r = f[i] - p["forces"][i]
        per[a[i]] += r @ np.linalg.solve(p["force_cov"][i], r) + np.linalg.slogdet(p["force_cov"][i])[1]
    assert float(nll_jef(pred, tgt)) == pytest.approx(per.mean(), rel=1e-12)


def test_nll_e_is_jef_with_identity_covariance(rng):
    pred, tgt = toy(rng)
    pred["force_cov"] = torch.eye(3, dtype=torch.float64).expand(6, 3, 3)
    assert float(nll_e(pred, tgt)) == pytest.approx(float(nll_jef(pred, tgt)), rel=1e-14)


def test_unit_variance_jef_gradient_equals_mse(rng):
    pred, tgt = toy(rng)
    mean_e = pred["energy"].clone().requires_grad_(True)
    mean_f = pred["forces"].clone().requires_grad_(True)
    base = {"energy": mean_e, "forces": mean_f}
    unit = dict(base, energy_var=torch.ones(3, dtype=torch.float64), force_cov=torch.eye(3, dtype=torch.float64).expand(6, 3, 3))
    g_jef = torch.autograd.grad(nll_jef(unit, tgt), [mean_e, mean_f])
    g_mse = torch.autograd.grad(mse_loss(base, tgt), [mean_e, mean_f])
    for a, b in zip(g_jef, g_mse):
        torch.testing.assert_close(a, b, rtol=1e-15, atol=1e-15)


def test_losses_are_mean_over_structures(rng):
    pred, tgt = toy(rng, n_structs=2, atoms=(2, 2))
    doubled_tgt = Targets(tgt.energy.repeat(2), tgt.forces.repeat(2, 1), torch.cat([tgt.atom_struct, tgt.atom_struct + 2]))
    doubled = {k: v.repeat(2, *([1] * (v.dim() - 1))) for k, v in pred.items()}
    for kind in ("MSE", "NLL_E", "NLL_JEF"):
        f = loss_fn(kind)
        assert float(f(doubled, doubled_tgt)) == pytest.approx(float(f(pred, tgt)), rel=1e-14)


def test_registry_and_errors(rng):
    assert required_head("NLL_JEF") == "MVE8" and required_head("MSE") is None
    with pytest.raises(ValueError):
        loss_fn("HUBER")
    with pytest.raises(ValueError):
        LossWeights(0.0, 0.0)
    pred, tgt = toy(rng)
    del pred["force_cov"]
    with pytest.raises(ShapeError):
        nll_jef(pred, tgt)
    with pytest.raises(MissingLabel):
        targets([AtomicStructure([[0, 0, 0]], [1], energy=1.0)])
