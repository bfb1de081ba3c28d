import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bam.errors import DivergedGradient, NoData, NotReady, ShapeError
from bam.geometry import AtomicStructure
from bam.model import ModelConfig, forward, init_params, is_last_layer_param
from bam.posterior import (
    EnsembleState,
    IvonHyper,
    IvonState,
    LaplaceState,
    SwagState,
    aggregate_cov,
    de_aggregate,
    ggn_diagonal,
    ivon_step,
    laplace_fit,
    member_moments,
    member_predictions,
    posterior_predict,
    swag_collect,
    swag_covariance,
    swag_sample,
)
from conftest import random_cluster, randomize_heads
from oracles import ivon_reference_step, mixture_moments_mc


# -- moment matching -------------------------------------------------------------


def test_two_component_mixture_against_monte_carlo():
    agg = de_aggregate([[0.0], [2.0]], [[1.0], [1.0]])
    assert (agg.mean[0], agg.aleatoric[0], agg.epistemic[0], agg.total[0]) == (1.0, 1.0, 1.0, 2.0)
    mc_mean, mc_var = mixture_moments_mc([0.0, 2.0], [1.0, 1.0], 10**6, np.random.default_rng(0))
    assert abs(mc_mean - 1.0) < 0.005 * 2  # relative to the mixture sd
    assert mc_var == pytest.approx(agg.total[0], rel=5e-3)


def test_random_mixtures_against_monte_carlo():
    rng = np.random.default_rng(1)
    for _ in range(3):
        mu, var = rng.normal(size=5), rng.uniform(0.2, 2.0, size=5)
        agg = de_aggregate(mu[:, None], var[:, None])
        mc_mean, mc_var = mixture_moments_mc(mu, var, 10**6, rng)
        assert abs(mc_mean - agg.mean[0]) < 0.005 * math.sqrt(agg.total[0])
        assert mc_var == pytest.approx(agg.total[0], rel=5e-3)


@given(arrays(np.float64, (4, 3), elements=st.floats(-1e3, 1e3)), arrays(np.float64, (4, 3), elements=st.floats(0, 1e3)))
def test_variance_decomposition(means, variances):
    agg = de_aggregate(means, variances)
    assert np.all(agg.total >= agg.aleatoric) and np.all(agg.total >= 0)
    raw = (variances + means**2).mean(0) - means.mean(0) ** 2
    np.testing.assert_allclose(agg.total, raw, rtol=1e-9, atol=1e-9 * (1 + np.abs(means).max() ** 2))


def test_identical_members_and_errors():
    agg = de_aggregate(np.full((3, 2), 0.7), np.full((3, 2), 0.2))
    assert np.all(agg.epistemic == 0) and np.allclose(agg.total, 0.2)
    with pytest.raises(ShapeError):
        de_aggregate(np.zeros((2, 3)), np.zeros((2, 2)))


def test_aggregate_cov_diagonal_matches_scalar(rng):
    means = rng.normal(size=(4, 2, 3))
    covs = np.einsum("...ij,...kj->...ik", A := rng.normal(size=(4, 2, 3, 3)), A)
    mu, total, alea, epi = aggregate_cov(means, covs)
    scalar = de_aggregate(means, np.diagonal(covs, axis1=-2, axis2=-1))
    np.testing.assert_allclose(np.diagonal(total, axis1=-2, axis2=-1), scalar.total, rtol=1e-12)
    raw = (covs + np.einsum("m...i,m...j->m...ij", means, means)).mean(0) - np.einsum("...i,...j->...ij", mu, mu)
    np.testing.assert_allclose(total, raw, atol=1e-12)


# -- SWAG ------------------------------------------------------------------------


def collect(snapshots, rank=20):
    state = SwagState.empty(len(snapshots[0]), rank)
    for s in snapshots:
        state = swag_collect(state, s)
    return state


def test_swag_constant_snapshots():
    state = collect([np.full(3, 1.5)] * 4)
    np.testing.assert_allclose(state.mean, 1.5)
    assert np.all(state.diag == 0) and all(np.all(d == 0) for d in state.deviations)
    np.testing.assert_array_equal(swag_sample(state, np.random.default_rng(0)), state.mean)


def test_swag_two_point_arithmetic():
    state = collect([np.array([0.0]), np.array([2.0])])
    assert state.mean[0] == 1.0 and state.diag[0] == 1.0


def test_swag_statistical_moments():
    rng = np.random.default_rng(2)
    draws = rng.normal(5.0, 0.3, size=(1000, 1))
    state = collect(list(draws))
    assert abs(state.mean[0] - 5.0) < 3 * 0.3 / math.sqrt(1000)
    assert state.diag[0] == pytest.approx(0.09, rel=0.1)
    assert len(state.deviations) == 20 and state.n_collected == 1000


def test_swag_sampling_law():
    rng = np.random.default_rng(3)
    state = collect(list(rng.normal(size=(8, 5)) * [1, 2, 0.5, 1, 3]), rank=6)
    samples = np.stack([swag_sample(state, rng) for _ in range(10**5)])
    emp = np.cov(samples.T)
    target = swag_covariance(state)
    np.testing.assert_allclose(target, np.diag(state.diag) / 2 + state.deviation_matrix() @ state.deviation_matrix().T / 10)
    assert np.linalg.norm(emp - target) / np.linalg.norm(target) < 0.05


def test_swag_determinism_and_readiness():
    state = collect([np.zeros(2), np.ones(2), np.array([2.0, 0.0])])
    a = swag_sample(state, np.random.default_rng(9))
    b = swag_sample(state, np.random.default_rng(9))
    assert np.array_equal(a, b)
    with pytest.raises(NotReady):
        swag_sample(collect([np.zeros(2)]), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        swag_collect(state, np.zeros(3))


# -- IVON ------------------------------------------------------------------------


def test_ivon_hand_computed_step():
    hp = IvonHyper(lr=0.1, beta1=0.9, rho=0.01, delta=1e-4, ess=1.0, h0=1.0)
    state = IvonState.init([1.0], hp)
    new = ivon_step(state, lambda th: th, theta=np.array([1.0]))
    # sample at the mean: h_hat = 0, g = 0.1, g_bar = 1
    h1 = 0.99 * 1.0 + 0.01 * 0.0 + 0.5 * 0.01**2 * (1.0 - 0.0) ** 2 / (1.0 + 1e-4)
    m1 = 1.0 - 0.1 * (1.0 + 1e-4 * 1.0) / (h1 + 1e-4)
    assert new.h[0] == h1 and new.m[0] == m1 and new.g[0] == (1 - 0.9) * 1.0
    ref = ivon_reference_step(1.0, 1.0, 0.0, 1.0, 1.0, 0.1, 0.9, 0.01, 1e-4, 1.0, 1)
    assert (new.m[0], new.h[0], new.g[0]) == ref


@given(st.integers(0, 2**31 - 1))
def test_ivon_matches_reference_on_random_states(seed):
    rng = np.random.default_rng(seed)
    hp = IvonHyper(lr=rng.uniform(0.01, 0.5), rho=rng.uniform(1e-4, 0.1), ess=rng.uniform(1, 1e4), h0=rng.uniform(0.1, 2))
    state = IvonState.init([rng.normal()], hp)
    for _ in range(3):
        theta = state.m + state.sigma * rng.standard_normal(1)
        ref = ivon_reference_step(state.m[0], state.h[0], state.g[0], 2 * theta[0], theta[0], hp.lr, hp.beta1,
                                  hp.rho, hp.delta, hp.ess, state.t + 1)
        state = ivon_step(state, lambda th: 2 * th, theta=theta)
        np.testing.assert_allclose([state.m[0], state.h[0], state.g[0]], ref, rtol=1e-12)


def test_ivon_zero_gradient_decay():
    state = IvonState.init([1.0], IvonHyper(lr=0.1, h0=1.0, rho=0.05))
    prev_m, prev_h = 1.0, 1.0
    for _ in range(200):
        state = ivon_step(state, lambda th: np.zeros_like(th), rng=np.random.default_rng(0))
        assert abs(state.m[0]) < prev_m and state.h[0] < prev_h
        prev_m, prev_h = abs(state.m[0]), state.h[0]
    assert prev_h < 1e-2


def test_ivon_long_run_quadratic():
    hp = IvonHyper(lr=0.05, rho=1e-3, ess=1e4, h0=1.0)
    for seed in range(5):
        rng = np.random.default_rng(seed)
        state = IvonState.init([1.0], hp)
        for _ in range(5000):
            state = ivon_step(state, lambda th: th, rng=rng)
        assert abs(state.m[0]) < 1e-2
        assert state.h[0] == pytest.approx(1.0, rel=0.2)


def test_ivon_diverged_gradient():
    with pytest.raises(DivergedGradient):
        ivon_step(IvonState.init([1.0]), lambda th: np.array([np.nan]), rng=np.random.default_rng(0))


# -- Laplace ---------------------------------------------------------------------


def test_ggn_linear_gaussian_toy():
    out = lambda th, x: th * x
    assert ggn_diagonal(out, [0.3], [1.0] * 7, lambda x: 1.0)[0] == 7.0
    with pytest.raises(NoData):
        ggn_diagonal(out, [0.3], [], lambda x: 1.0)


def test_ggn_two_parameter_dense_oracle(rng):
    X = rng.normal(size=(6, 3, 2))  # per datum: 3 outputs, 2 params
    lam = [A @ A.T + np.eye(3) for A in rng.normal(size=(6, 3, 3))]
    out = lambda th, k: torch.as_tensor(X[k]) @ th
    ours = ggn_diagonal(out, [0.1, -0.2], range(6), lambda k: lam[k])
    dense = sum(X[k].T @ lam[k] @ X[k] for k in range(6))
    np.testing.assert_allclose(ours, np.diag(dense), rtol=1e-10)
    vec = ggn_diagonal(out, [0.1, -0.2], range(6), lambda k: np.diag(lam[k]))
    np.testing.assert_allclose(vec, sum(np.einsum("ap,a,ap->p", X[k], np.diag(lam[k]), X[k]) for k in range(6)))


def test_laplace_species_curvature_counts_atoms(rng):
    cfg = ModelConfig(species_list=(1, 8), head_mode="Base", hidden_irreps="2x0e+2x1o", feature_dim=4, l_max=1)
    params = randomize_heads(init_params(cfg, rng), rng)
    structs = [random_cluster(rng, n=n, species=(1, 8)) for n in (3, 4)]
    state = laplace_fit(cfg, params.numpy_flat(), structs, prior_precision=2.0, noise_var=0.5)
    names = [n for n in params.names() if is_last_layer_param(n)]
    assert names[0] == "species_energy"
    counts = np.array([[np.sum(s.species == z) for z in cfg.species_list] for s in structs])
    np.testing.assert_allclose(state.ggn_diag[:2], (counts**2).sum(0) / 0.5, rtol=1e-12)
    assert state.mask.sum() == 2 + cfg.n_layers * cfg.feature_dim
    assert np.all(state.ggn_diag >= 0)


def test_laplace_prior_limit_and_errors(rng):
    theta = rng.normal(size=4)
    tight = LaplaceState(theta, np.array([True, False, True, True]), np.ones(3), prior_precision=1e16)
    np.testing.assert_allclose(tight.sample(rng), theta, atol=1e-7)
    with pytest.raises(ShapeError):
        LaplaceState(theta, np.ones(4, dtype=bool), np.ones(3))
    cfg = ModelConfig(species_list=(1,), head_mode="Base", hidden_irreps="2x0e", feature_dim=2, l_max=0)
    with pytest.raises(NoData):
        laplace_fit(cfg, init_params(cfg, rng).numpy_flat(), [])


# -- predictive aggregation ------------------------------------------------------


@pytest.fixture(scope="module")
def mve_setup():
    rng = np.random.default_rng(21)
    cfg = ModelConfig(species_list=(1, 6, 8), hidden_irreps="2x0e+2x1o+2x2e", feature_dim=4)
    thetas = [randomize_heads(init_params(cfg, rng), rng).numpy_flat() for _ in range(3)]
    structs = [random_cluster(rng, n=n) for n in (3, 5)]
    return cfg, thetas, structs


def test_identical_ensemble_equals_single_model(mve_setup):
    cfg, thetas, structs = mve_setup
    from bam.model import ModelParams

    preds = posterior_predict(EnsembleState([thetas[0]] * 3), cfg, structs)
    for s, p in zip(structs, preds):
        single = forward(s, cfg, ModelParams.from_flat(cfg, thetas[0]))
        assert p.energy_mean == pytest.approx(single.energy_mean, abs=1e-12)
        assert p.energy_epistemic == pytest.approx(0.0, abs=1e-20)
        np.testing.assert_allclose(p.force_cov, single.force_cov, atol=1e-12)


def test_ensemble_reaggregation_oracle(mve_setup):
    cfg, thetas, structs = mve_setup
    preds = posterior_predict(EnsembleState(thetas), cfg, structs)
    _, outs = member_predictions(cfg, thetas, structs)
    ref = de_aggregate([o["energy"] for o in outs], [o["energy_var"] for o in outs])
    for b, p in enumerate(preds):
        assert (p.energy_mean, p.energy_var, p.energy_epistemic) == (ref.mean[b], ref.total[b], ref.epistemic[b])


def test_degenerate_swag_posterior_has_no_epistemic_part(mve_setup):
    cfg, thetas, structs = mve_setup
    state = collect([thetas[0]] * 3)
    preds = posterior_predict(state, cfg, structs, n_samples=2, rng=np.random.default_rng(0))
    assert all(p.energy_epistemic == 0.0 for p in preds)


def test_member_moments_shapes(mve_setup):
    cfg, thetas, structs = mve_setup
    m = member_moments(EnsembleState(thetas), cfg, structs)
    n = sum(len(s) for s in structs)
    assert m["energy"].shape == (3, 2) and m["energy_var"].shape == (3, 2)
    assert m["forces"].shape == (3, n, 3) and m["force_cov"].shape == (3, n, 3, 3)
    assert m["atom_struct"].tolist() == [0] * 3 + [1] * 5
    with pytest.raises(ShapeError):
        EnsembleState([thetas[0]])
