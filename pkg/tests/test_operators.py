import math

import numpy as np
import pytest
import scipy.linalg

from openlat import DomainSpec, build_domain_lattice
from openlat.operators import (
    OperatorError,
    PairOperator,
    assemble_pair,
    assemble_walk,
)
import openlat.operators as ops_mod

from conftest import site_at


def literal_walk_matrix(lat, beta):
    """Interior generator assembled with explicit loops, for comparison."""
    eps, n = lat.eps, lat.n_sites
    a = np.zeros((n, n))
    for i in range(n):
        for j in lat.neighbors(i):
            a[i, int(j)] += eps ** -2
            a[i, i] -= eps ** -2
        if not math.isinf(beta):
            a[i, i] -= eps ** (beta - 2) * lat.alpha[i]
    return a


def closure_dense(op):
    return op.closure_matrix.toarray()


# ---------------------------------------------------------------------------
# assembly identities


@pytest.mark.parametrize("beta", [0.0, 1.0, 3.0, math.inf])
def test_closure_rows_conserve(lat4, beta):
    op = assemble_walk(lat4, beta)
    sums = np.asarray(closure_dense(op).sum(axis=1)).ravel()
    assert np.max(np.abs(sums)) < 1e-9


@pytest.mark.parametrize("beta", [0.0, 1.0, 3.0])
def test_literal_assembly_matches(lat4, beta):
    op = assemble_walk(lat4, beta)
    assert np.allclose(
        op.omega_matrix.toarray(), literal_walk_matrix(lat4, beta), atol=1e-12
    )


def test_interior_block_splits_into_free_part_and_killing(lat4):
    free = assemble_walk(lat4, math.inf)
    for beta in (0.0, 1.0, 3.0):
        op = assemble_walk(lat4, beta)
        kill = lat4.eps ** (beta - 1.0) * (lat4.alpha / lat4.eps)
        diff = op.omega_matrix.toarray() - (
            free.omega_matrix.toarray() - np.diag(kill)
        )
        assert np.max(np.abs(diff)) < 1e-12


def test_self_adjoint(lat8):
    rng = np.random.default_rng(7)
    for beta in (0.0, 1.5, math.inf):
        op = assemble_walk(lat8, beta)
        f = rng.normal(size=lat8.n_sites)
        g = rng.normal(size=lat8.n_sites)
        assert op.l2_inner(f, op.apply(g)) == pytest.approx(
            op.l2_inner(op.apply(f), g), rel=1e-10, abs=1e-10
        )


# ---------------------------------------------------------------------------
# semigroup


@pytest.mark.parametrize("beta", [0.0, 1.0, 3.0, math.inf])
@pytest.mark.parametrize("t", [0.01, 0.3, 2.0])
def test_semigroup_matches_expm(lat4, beta, t):
    op = assemble_walk(lat4, beta)
    rng = np.random.default_rng(3)
    f = rng.normal(size=op.n_sites)
    f_out = rng.normal(size=op.n_outer)
    expected = scipy.linalg.expm(t * closure_dense(op)) @ np.concatenate([f, f_out])
    got = op.semigroup_apply(f, t, f_out)
    assert np.max(np.abs(got - expected)) < 1e-10
    killed = scipy.linalg.expm(t * op.omega_matrix.toarray()) @ f
    assert np.max(np.abs(op.semigroup_apply(f, t) - killed)) < 1e-10


def test_semigroup_chunked_long_time(lat8):
    # rate * t beyond the series window, exercises time chunking
    op = assemble_walk(lat8, 0.0)
    f = lat8.evaluate(lambda p: p[0] + 0.3)
    t = 2.0
    assert float(op.exit_rate.max()) * t > 500
    expected = scipy.linalg.expm(t * op.omega_matrix.toarray()) @ f
    assert np.max(np.abs(op.semigroup_apply(f, t) - expected)) < 1e-9


def test_semigroup_preserves_constants(lat4):
    op = assemble_walk(lat4, 1.0)
    ones = np.ones(op.n_sites)
    out = op.semigroup_apply(ones, 0.7, np.ones(op.n_outer))
    assert np.max(np.abs(out - 1.0)) < 1e-11


def test_killed_semigroup_contracts_and_preserves_sign(lat8):
    op = assemble_walk(lat8, 0.5)
    rng = np.random.default_rng(11)
    f = rng.uniform(0.0, 2.0, size=op.n_sites)
    out = op.semigroup_apply(f, 0.4)
    assert np.min(out) > -1e-12
    assert np.max(out) <= np.max(f) * (1 + 1e-12)


def test_heat_kernel_stochastic_and_symmetric(lat4):
    op = assemble_walk(lat4, 1.0)
    total = op.n_sites + op.n_outer
    t = 0.35
    p = np.column_stack([op.heat_kernel_column(y, t) for y in range(total)])
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-11)
    assert np.min(p) > -1e-13
    n = op.n_sites
    assert np.allclose(p[:n, :n], p[:n, :n].T, atol=1e-11)
    # interior mass drains to the absorbing exterior
    late = op.heat_kernel_column(site_at(lat4, (0.0, 0.0)), 50.0)
    assert late[:n].sum() < 1e-6


def test_heat_kernel_bad_site(lat4):
    op = assemble_walk(lat4, 1.0)
    with pytest.raises(OperatorError):
        op.heat_kernel_column(10 ** 6, 0.1)


# ---------------------------------------------------------------------------
# spectrum


def test_spectrum_matches_dense_oracle(lat8):
    for beta in (0.0, 1.0, 3.0):
        op = assemble_walk(lat8, beta)
        vals = np.linalg.eigvalsh(-op.omega_matrix.toarray())
        spec = op.spectrum(6)
        assert np.allclose(spec.eigenvalues, vals[:6], rtol=1e-9, atol=1e-9)
        # eigenfunctions orthonormal in the volume measure
        gram = lat8.mu_weight * spec.eigenfunctions.T @ spec.eigenfunctions
        assert np.allclose(gram, np.eye(6), atol=1e-9)


def test_spectrum_sparse_path(square):
    lat = build_domain_lattice(square, 1.0 / 64.0)
    op = assemble_walk(lat, 1.0)
    assert op.n_sites > ops_mod._DENSE_EIG_LIMIT
    spec = op.spectrum(3)
    dense_head = np.sort(
        scipy.sparse.linalg.eigsh(
            (-op.omega_matrix).tocsc(), k=3, sigma=-1e-6, which="LM"
        )[0]
    )
    assert np.allclose(spec.eigenvalues, dense_head, rtol=1e-8)
    assert spec.eigenvalues[0] > 0


def test_free_walk_ground_state_exact(lat8):
    op = assemble_walk(lat8, math.inf)
    lam, psi = op.ground_state()
    assert lam == 0.0
    assert np.allclose(psi, psi[0])
    assert op.l2_norm(psi) == pytest.approx(1.0, rel=1e-12)
    spec = op.spectrum(2)
    assert spec.eigenvalues[0] == 0.0
    assert spec.eigenvalues[1] > 0.1


def test_ground_state_positive_and_ordered(lat8):
    lams = []
    for beta in (0.0, 1.0, 3.0):
        op = assemble_walk(lat8, beta)
        lam, psi = op.ground_state()
        assert np.min(psi) > 0
        assert lam > 0
        lams.append(lam)
    # stronger boundary coupling kills faster: lam0 decreasing in beta
    assert lams[0] > lams[1] > lams[2] > 0


def test_semigroup_domination_in_beta(lat8):
    rng = np.random.default_rng(23)
    f = rng.uniform(0.0, 1.0, size=lat8.n_sites)
    t = 0.3
    outs = [
        assemble_walk(lat8, beta).semigroup_apply(f, t)
        for beta in (0.0, 1.0, 3.0, math.inf)
    ]
    for lo, hi in zip(outs, outs[1:]):
        assert np.all(lo <= hi + 1e-12)


# ---------------------------------------------------------------------------
# harmonic profiles


def test_harmonic_profile_constant(lat8):
    op = assemble_walk(lat8, 1.0)
    h = op.harmonic_profile(0.75)
    assert np.max(np.abs(h - 0.75)) < 1e-10


def test_harmonic_profile_is_harmonic_and_bounded(lat8):
    op = assemble_walk(lat8, 2.0)
    theta = lambda z: 0.5 + 0.4 * z[0] - 0.1 * z[1]
    h = op.harmonic_profile(theta)
    theta_out = op.outer_values(theta)
    resid = op.omega_matrix.dot(h) + op.cross_matrix.dot(theta_out)
    assert np.max(np.abs(resid)) < 1e-8
    assert theta_out.min() - 1e-12 <= h.min()
    assert h.max() <= theta_out.max() + 1e-12


def test_harmonic_profile_linear_in_data(lat4):
    op = assemble_walk(lat4, 1.0)
    t1 = op.outer_values(lambda z: z[0])
    t2 = op.outer_values(lambda z: z[1] ** 2)
    h = op.harmonic_profile(2.0 * t1 + 3.0 * t2)
    assert np.allclose(
        h, 2.0 * op.harmonic_profile(t1) + 3.0 * op.harmonic_profile(t2), atol=1e-11
    )


def test_harmonic_profile_beta_inf_raises(lat4):
    op = assemble_walk(lat4, math.inf)
    with pytest.raises(OperatorError, match="beta"):
        op.harmonic_profile(1.0)


def test_cg_solver_agrees_with_direct(lat8, monkeypatch):
    op = assemble_walk(lat8, 1.0)
    theta = lambda z: 1.0 + z[0]
    direct = op.harmonic_profile(theta)
    monkeypatch.setattr(ops_mod, "_DIRECT_SOLVE_LIMIT", 1)
    op2 = assemble_walk(lat8, 1.0)
    iterative = op2.harmonic_profile(theta)
    assert np.max(np.abs(direct - iterative)) < 1e-9


# ---------------------------------------------------------------------------
# quadratic forms


@pytest.mark.parametrize("beta", [0.0, 1.0, 3.0, math.inf])
def test_dirichlet_form_matches_generator(lat8, beta):
    op = assemble_walk(lat8, beta)
    rng = np.random.default_rng(5)
    f = rng.normal(size=op.n_sites)
    g = rng.normal(size=op.n_sites)
    lhs = op.dirichlet_form(f, g)
    rhs = -op.l2_inner(f, op.apply(g))
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)
    assert op.dirichlet_form(f) >= 0.0


def test_dirichlet_form_of_constants(lat8):
    op = assemble_walk(lat8, 1.0)
    ones = np.ones(op.n_sites)
    assert op.dirichlet_form(ones) == pytest.approx(
        op.killing_scale * lat8.sigma_mass, rel=1e-12
    )
    free = assemble_walk(lat8, math.inf)
    assert free.dirichlet_form(ones) == pytest.approx(0.0, abs=1e-14)


def test_carre_du_champ_aggregates_to_form(lat8):
    op = assemble_walk(lat8, 1.5)
    rng = np.random.default_rng(9)
    f = rng.normal(size=op.n_sites)
    g = rng.normal(size=op.n_sites)
    gamma = op.carre_du_champ(f, g)
    assert lat8.mu_sum(gamma) == pytest.approx(op.dirichlet_form(f, g), rel=1e-10)
    gf = op.carre_du_champ(f)
    gg = op.carre_du_champ(g)
    assert np.min(gf) >= 0.0
    # pointwise Cauchy-Schwarz
    assert np.all(np.abs(gamma) <= np.sqrt(gf * gg) + 1e-10)


# ---------------------------------------------------------------------------
# pair operator


def test_pair_state_counts(lat4):
    n, m = lat4.n_sites, lat4.n_outer
    sep = assemble_pair(lat4, 1.0, -1)
    assert sep.n_states == (n + m) ** 2 - n
    sip = assemble_pair(lat4, 1.0, 1)
    assert sip.n_states == (n + m) ** 2


@pytest.mark.parametrize("sigma", [-1, 1])
def test_pair_rows_conserve(lat4, sigma):
    op = assemble_pair(lat4, 1.0, sigma)
    sums = np.asarray(op.matrix.sum(axis=1)).ravel()
    assert np.max(np.abs(sums)) < 1e-9


@pytest.mark.parametrize("sigma", [-1, 1])
@pytest.mark.parametrize("beta", [0.0, 1.0, math.inf])
def test_pair_intertwines_with_sum_lift(lat4, sigma, beta):
    pair = assemble_pair(lat4, beta, sigma)
    rng = np.random.default_rng(31)
    f = rng.normal(size=lat4.n_sites + lat4.n_outer)
    lhs = pair.matrix.dot(pair.lift_sum(f))
    rhs = pair.lift_sum(pair.walk.closure_matrix.dot(f))
    scale = lat4.eps ** -2.0
    assert np.max(np.abs(lhs - rhs)) < 1e-10 * scale


@pytest.mark.parametrize("sigma", [-1, 1])
def test_pair_symmetric_under_swap(lat4, sigma):
    op = assemble_pair(lat4, 1.0, sigma)
    rng = np.random.default_rng(13)
    f = rng.normal(size=lat4.n_sites + lat4.n_outer)
    sym = pytest.approx(0.0, abs=1e-12)
    # generator commutes with coordinate swap: evolve a symmetric lift
    F = op.lift_product(f)
    out = op.semigroup_apply(F, 0.2)
    for sid in range(op.n_states):
        a, b = int(op.state_a[sid]), int(op.state_b[sid])
        if a == b:
            continue
        assert out[sid] - out[op.state_index(b, a)] == sym


@pytest.mark.parametrize("sigma", [-1, 1])
def test_pair_weighted_self_adjoint_on_alive_block(lat4, sigma):
    # absorption is one-way, so symmetry holds on the alive block only
    op = assemble_pair(lat4, 1.0, sigma)
    alive = op.alive_mask()
    w = op.weights[alive]
    m = op.matrix.toarray()[np.ix_(alive, alive)]
    weighted = w[:, None] * m
    assert np.max(np.abs(weighted - weighted.T)) < 1e-9


@pytest.mark.parametrize("sigma", [-1, 1])
def test_two_point_profile_constant_data(lat4, sigma):
    op = assemble_pair(lat4, 1.0, sigma)
    c = 0.4
    h = np.full(lat4.n_sites, c)
    prof = op.two_point_profile(h, c)
    mask = ~np.eye(lat4.n_sites, dtype=bool)
    assert np.allclose(prof[mask], c * c, atol=1e-11)
    if sigma == 1:
        assert np.allclose(np.diag(prof), c * c, atol=1e-11)
    else:
        assert np.all(np.isnan(np.diag(prof)))


@pytest.mark.parametrize("sigma", [-1, 1])
def test_two_point_correlation_sign(lat4, sigma):
    op = assemble_pair(lat4, 1.0, sigma)
    theta = lambda z: 0.8 if z[0] > 0.26 else 0.2
    walk = op.walk
    h = walk.harmonic_profile(theta)
    cov, var = op.stationary_covariance(h, theta)
    off = cov[~np.eye(lat4.n_sites, dtype=bool)]
    assert np.all(sigma * off >= -1e-12)
    assert np.max(np.abs(off)) > 1e-6
    chi = h * (1.0 + sigma * h)
    if sigma == -1:
        assert np.allclose(var, chi)
    else:
        assert np.all(var >= chi - 1e-12)


def test_two_point_profile_beta_inf_raises(lat4):
    op = assemble_pair(lat4, math.inf, 1)
    with pytest.raises(OperatorError, match="beta"):
        op.two_point_profile(np.ones(lat4.n_sites), 1.0)


def test_pair_semigroup_matches_expm(lat4):
    op = assemble_pair(lat4, 0.5, -1)
    rng = np.random.default_rng(17)
    F = rng.normal(size=op.n_states)
    expected = scipy.linalg.expm(0.15 * op.matrix.toarray()) @ F
    got = op.semigroup_apply(F, 0.15)
    assert np.max(np.abs(got - expected)) < 1e-9


def test_pair_rejects_bad_sigma(lat4):
    with pytest.raises(OperatorError):
        PairOperator(lat4, 1.0, 2)


# ---------------------------------------------------------------------------
# dumps


def test_save_coo_roundtrip(lat4, tmp_path):
    op = assemble_walk(lat4, 1.0)
    path = tmp_path / "walk.coo"
    op.save_coo(path)
    lines = path.read_text().strip().split("\n")
    header = lines[0].split()
    assert header[0] == "#"
    rows, cols, nnz = int(header[1]), int(header[2]), int(header[3])
    assert rows == cols == op.n_sites + op.n_outer
    assert nnz == len(lines) - 1
    triples = [ln.split() for ln in lines[1:]]
    rebuilt = np.zeros((rows, cols))
    for r, c, v in triples:
        rebuilt[int(r), int(c)] = float(v)
    assert np.allclose(rebuilt, op.closure_matrix.toarray(), atol=0)
