import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bam.errors import InvalidPath, NonUnitVector, ShapeError, UnsupportedDegree
from bam.tensor_core import (
    EquivariantFeature,
    IrrepsSpec,
    build_cg_table,
    equivariant_linear,
    gate,
    random_rotation,
    rotate_feature,
    sh_components,
    spherical_harmonics,
    tensor_product,
    tp_paths,
    wigner_d,
)
from oracles import gaunt, real_sh, sphere_quadrature, wigner_by_projection

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def random_feature(spec, rng, batch=()):
    return EquivariantFeature(
        spec, {(l, p): torch.as_tensor(rng.normal(size=(*batch, m, 2 * l + 1))) for l, p, m in spec.entries}
    )


def max_diff(a, b):
    return max(float((a[k] - b[k]).abs().max()) for k in a.spec.keys)


def rotations(rng, n=20, improper=True):
    out = [random_rotation(rng) for _ in range(n)]
    if improper:
        out[1::2] = [-R for R in out[1::2]]
    return out


# -- irreps bookkeeping -------------------------------------------------------


def test_irreps_parse_sorts_and_counts():
    spec = IrrepsSpec.parse("4x1o+8x0e+2x0o+1x2e")
    assert spec.keys == [(0, 1), (0, -1), (1, -1), (2, 1)]
    assert spec.total_dim == 8 + 2 + 4 * 3 + 5
    assert str(spec) == "8x0e+2x0o+4x1o+1x2e"


def test_irreps_rejects_duplicates():
    with pytest.raises(ShapeError):
        IrrepsSpec(((0, 1, 2), (0, 1, 3)))


def test_feature_rejects_bad_block_shape():
    with pytest.raises(ShapeError):
        EquivariantFeature(IrrepsSpec.parse("2x1o"), {(1, -1): torch.zeros(2, 2)})


# -- spherical harmonics -------------------------------------------------------


def test_sh_l0_constant(rng):
    for d in rng.normal(size=(10, 3)):
        y = spherical_harmonics(unit(d), 0)
        assert float(y[(0, 1)][0, 0]) == pytest.approx(0.2820948, abs=1e-7)


def test_sh_l1_along_z():
    y = spherical_harmonics(np.array([0.0, 0.0, 1.0]), 1)[(1, -1)][0]
    assert y.tolist() == pytest.approx([0.0, math.sqrt(3 / (4 * math.pi)), 0.0], abs=1e-15)
    assert float(y[1]) == pytest.approx(0.4886025, abs=1e-7)


def test_sh_unsold_identity(rng):
    dirs = rng.normal(size=(100, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    for l in range(4):
        total = (sh_components(dirs, l) ** 2).sum(-1)
        np.testing.assert_allclose(total, (2 * l + 1) / (4 * math.pi), rtol=1e-13)


@given(arrays(np.float64, 3, elements=finite).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_sh_matches_scipy_real_basis(v):
    d = unit(v)
    for l in range(4):
        np.testing.assert_allclose(sh_components(d, l), real_sh(l, d)[0], atol=1e-12)


def test_sh_block_parity():
    y = spherical_harmonics(np.array([1.0, 0, 0]), 3)
    assert y.spec.keys == [(0, 1), (1, -1), (2, 1), (3, -1)]


def test_sh_orthonormal_monte_carlo():
    rng = np.random.default_rng(5)
    dirs = rng.normal(size=(100_000, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    Y = np.concatenate([sh_components(dirs, l) for l in range(4)], axis=1)
    gram = 4 * math.pi * Y.T @ Y / len(dirs)
    assert np.abs(gram - np.eye(16)).max() < 2e-2


def test_sh_errors():
    with pytest.raises(NonUnitVector):
        spherical_harmonics(np.array([1.0, 1.0, 0.0]), 1)
    with pytest.raises(UnsupportedDegree):
        spherical_harmonics(np.array([1.0, 0.0, 0.0]), 4)


def test_wigner_matches_projection_oracle(rng):
    for R in rotations(rng, 4, improper=False):
        for l in range(4):
            np.testing.assert_allclose(wigner_d(l, R), wigner_by_projection(l, R), atol=1e-12)


# -- Clebsch-Gordan ------------------------------------------------------------


def test_cg_scalar_coupling():
    table = build_cg_table(0)
    assert abs(table.coeff(0, 0, 0, 0, 0, 0)) == pytest.approx(1.0, abs=1e-15)


def test_cg_110_is_dot_product():
    C = build_cg_table(1)[(1, 1, 0)][:, :, 0]
    G = gaunt(1, 1, 0)[:, :, 0]
    # the grid integral of Y1a Y1b Y00 is delta_ab / sqrt(4 pi)
    np.testing.assert_allclose(G, np.eye(3) / math.sqrt(4 * math.pi), atol=1e-14)
    np.testing.assert_allclose(C, np.eye(3) * C[0, 0], atol=1e-14)


def test_cg_isometry_and_proportional_to_gaunt():
    table = build_cg_table(3)
    for (l1, l2, L), C in table.blocks.items():
        np.testing.assert_allclose(np.einsum("abM,abN->MN", C, C), np.eye(2 * L + 1), atol=1e-12)
        G = gaunt(l1, l2, L)
        if (l1 + l2 + L) % 2:
            assert np.abs(G).max() < 1e-13
        else:
            g = (G * C).sum() / (C * C).sum()
            np.testing.assert_allclose(G, g * C, atol=1e-13)


def test_cg_selection_and_exchange_rules():
    table = build_cg_table(3)
    for (l1, l2, L), C in table.blocks.items():
        for m1 in range(-l1, l1 + 1):
            for m2 in range(-l2, l2 + 1):
                for M in range(-L, L + 1):
                    if abs(M) not in (abs(m1 + m2), abs(m1 - m2)):
                        assert table.coeff(l1, l2, L, m1, m2, M) == 0.0
        swapped = table[(l2, l1, L)]
        np.testing.assert_allclose(swapped, (-1) ** (l1 + l2 - L) * C.transpose(1, 0, 2), atol=1e-14)


def test_cg_table_respects_triangle():
    table = build_cg_table(2)
    for l1, l2, L in table.paths():
        assert abs(l1 - l2) <= L <= l1 + l2 and max(l1, l2, L) <= 2
    assert table.coeff(0, 1, 2, 0, 0, 0) == 0.0


def test_cg_reconstructs_harmonic_products(rng):
    """Y_l1 Y_l2 = sum_L g_L C_L . Y_L for every pair whose products stay
    inside the degree cap; g_L comes from the quadrature oracle."""
    table = build_cg_table(3)
    dirs = rng.normal(size=(50, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    for l1 in range(4):
        for l2 in range(4 - l1):
            product = np.einsum("na,nb->nab", real_sh(l1, dirs), real_sh(l2, dirs))
            recon = np.zeros_like(product)
            for L in range(abs(l1 - l2), l1 + l2 + 1):
                C = table[(l1, l2, L)]
                G = gaunt(l1, l2, L)
                g = (G * C).sum() / (C * C).sum()
                recon += g * np.einsum("abM,nM->nab", C, real_sh(L, dirs))
            np.testing.assert_allclose(recon, product, atol=1e-10)


# -- tensor products, linear maps, gates ----------------------------------------


def test_tp_scalar_identity(rng):
    a = EquivariantFeature(IrrepsSpec.parse("1x0e"), {(0, 1): torch.ones(1, 1)})
    spec = IrrepsSpec.parse("3x1o+2x2e")
    b = random_feature(spec, rng)
    w = [torch.tensor([2.0, 2.0, 2.0]), torch.tensor([2.0, 2.0])]
    out = tensor_product(a, b, spec, w)
    for k in spec.keys:
        torch.testing.assert_close(out[k], 2.0 * b[k], rtol=1e-14, atol=1e-14)


def test_tp_vector_square_norm(rng):
    v = rng.normal(size=3)
    x = EquivariantFeature(IrrepsSpec.parse("1x1o"), {(1, -1): torch.as_tensor(v[None, [1, 2, 0]])})
    out = tensor_product(x, x, IrrepsSpec.parse("1x0e"))[(0, 1)][0, 0]
    assert float(out) == pytest.approx(np.dot(v, v) / math.sqrt(3), rel=1e-14)


def test_tp_parity_of_odd_pairs():
    odd = IrrepsSpec.parse("1x1o+1x3o")
    for path in tp_paths(odd, odd, [(L, P) for L in range(4) for P in (1, -1)]):
        assert path.P == 1


def test_tp_missing_path():
    a = random_feature(IrrepsSpec.parse("1x1o"), np.random.default_rng(0))
    with pytest.raises(InvalidPath):
        tensor_product(a, a, IrrepsSpec.parse("1x0o"))


def test_tp_equivariance_uvu_and_uvw(rng):
    a_spec = IrrepsSpec.parse("2x0e+2x1o+2x2e")
    b_spec = IrrepsSpec.parse("2x1o+2x2e+2x3o")
    a, b = random_feature(a_spec, rng, (3,)), random_feature(b_spec, rng, (3,))
    out_keys = [(0, 1), (1, -1), (2, 1), (3, -1), (1, 1)]
    paths = tp_paths(a_spec, b_spec, out_keys)
    from bam.tensor_core import uvu_output_spec

    uvu_spec = uvu_output_spec(a_spec, b_spec, out_keys)
    uvu_w = [torch.as_tensor(rng.normal(size=2)) for _ in paths]
    out_spec = IrrepsSpec.from_dict({k: 3 for k in out_keys})
    uvw_w = [torch.as_tensor(rng.normal(size=(2, 2, 3))) for _ in paths]
    for R in rotations(rng):
        ra, rb = rotate_feature(a, R), rotate_feature(b, R)
        for spec, w, mode in ((uvu_spec, uvu_w, "uvu"), (out_spec, uvw_w, "uvw")):
            lhs = tensor_product(ra, rb, spec, w, mode)
            rhs = rotate_feature(tensor_product(a, b, spec, w, mode), R)
            scale = max(float(v.abs().max()) for v in rhs.blocks.values())
            assert max_diff(lhs, rhs) <= 1e-10 * scale


def test_linear_identity_zero_and_equivariance(rng):
    spec = IrrepsSpec.parse("3x0e+2x1o+2x2e")
    x = random_feature(spec, rng, (4,))
    eye = {(l, p): torch.eye(m, dtype=torch.float64) for l, p, m in spec.entries}
    zero = {(l, p): torch.zeros(m, m, dtype=torch.float64) for l, p, m in spec.entries}
    assert max_diff(equivariant_linear(x, eye), x) == 0.0
    assert all(float(v.abs().max()) == 0 for v in equivariant_linear(x, zero).blocks.values())
    W = {(l, p): torch.as_tensor(rng.normal(size=(m, m))) for l, p, m in spec.entries}
    for R in rotations(rng):
        assert max_diff(equivariant_linear(rotate_feature(x, R), W), rotate_feature(equivariant_linear(x, W), R)) < 1e-12


def test_linear_shape_error(rng):
    spec = IrrepsSpec.parse("2x1o")
    with pytest.raises(ShapeError):
        equivariant_linear(random_feature(spec, rng), {(1, -1): torch.zeros(2, 3, dtype=torch.float64)})


def test_gate_asymptote_and_zero(rng):
    spec = IrrepsSpec.parse("1x0e+2x1o")
    x = random_feature(spec, rng)
    big = gate(x, torch.full((2,), 10.0, dtype=torch.float64))
    ratio = big[(1, -1)] / x[(1, -1)]
    assert float((ratio - 10 / (1 + math.exp(-10))).abs().max()) < 1e-12
    assert float((ratio - 9.9995).abs().max()) < 5e-5
    closed = gate(x, torch.zeros(2, dtype=torch.float64))
    assert float(closed[(1, -1)].abs().max()) == 0.0
    torch.testing.assert_close(closed[(0, 1)], torch.nn.functional.silu(x[(0, 1)]))


def test_gate_channel_mismatch(rng):
    x = random_feature(IrrepsSpec.parse("1x0e+2x1o"), rng)
    with pytest.raises(ShapeError):
        gate(x, torch.zeros(3, dtype=torch.float64))


def test_gate_equivariance(rng):
    spec = IrrepsSpec.parse("2x0e+1x0o+2x1o+1x2e")
    x = random_feature(spec, rng, (2,))
    g = torch.as_tensor(rng.normal(size=(2, 3)))
    for R in rotations(rng):
        assert max_diff(gate(rotate_feature(x, R), g), rotate_feature(gate(x, g), R)) < 1e-12


def test_quadrature_integrates_constant():
    _, w = sphere_quadrature()
    assert w.sum() == pytest.approx(4 * math.pi, rel=1e-14)
