import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize, stats

from swarmobs import continuum_params
from swarmobs import patterns as pat
from swarmobs.errors import DegenerateField, EmptyCandidates
from swarmobs.ibm import ParticleState
from swarmobs.pde import MacroField, uniform_field
from swarmobs.sampling import sample_points


# ---------------------------------------------------------------- sampling

def test_sample_points_uniform_chi_square():
    pts = sample_points(np.ones((16, 16)), 100_000, 0)
    assert np.all((pts >= 0) & (pts < 1))
    counts, _, _ = np.histogram2d(pts[:, 0], pts[:, 1], bins=10, range=[[0, 1], [0, 1]])
    assert stats.chisquare(counts.ravel()).pvalue > 0.01


def test_sample_points_single_cell_and_determinism():
    rho = np.zeros((8, 8))
    rho[3, 5] = 2.0
    pts = sample_points(rho, 500, 1)
    h = 1 / 8
    assert np.all(np.abs(pts[:, 0] - 3 * h) <= h / 2) and np.all(np.abs(pts[:, 1] - 5 * h) <= h / 2)
    np.testing.assert_array_equal(pts, sample_points(rho, 500, 1))
    with pytest.raises(ValueError):
        sample_points(np.zeros((4, 4)), 10, 0)


# ---------------------------------------------------------------- deposition

def test_pic_deposit_node_and_centre():
    h = 0.25
    rho = pat.pic_deposit(np.array([[0.5, 0.25]]), h)
    expected = np.zeros((4, 4))
    expected[2, 1] = 1 / h**2
    np.testing.assert_allclose(rho, expected, atol=1e-12)
    rho = pat.pic_deposit(np.array([[0.125, 0.875]]), h)
    mass = rho * h * h
    np.testing.assert_allclose(mass[[0, 1, 0, 1], [3, 3, 0, 0]], 0.25)
    assert mass.sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.sampled_from([4, 10, 32, 100]), N=st.integers(1, 300))
def test_pic_deposit_mass(seed, n, N):
    pts = np.random.default_rng(seed).uniform(-2, 3, (N, 2))
    rho = pat.pic_deposit(pts, 1.0 / n)
    assert rho.sum() / n**2 == pytest.approx(1.0, abs=1e-12)
    assert np.all(rho >= 0)


def test_pic_deposit_rejects_bad_spacing():
    with pytest.raises(ValueError):
        pat.pic_deposit(np.zeros((1, 2)), 0.3)


def smooth_field(n):
    x = np.arange(n) / n
    return 1 + 0.5 * np.cos(2 * np.pi * x)[:, None] * np.sin(2 * np.pi * x)[None, :]


def test_deposit_then_interpolate_converges():
    fine = smooth_field(128)
    errs = []
    for m in (8, 16, 32):
        N = 40 * m * m
        pts = sample_points(fine, N, 3)
        back = pat.interpolate_periodic(pat.pic_deposit(pts, 1 / m), 128)
        errs.append(pat.l2_distance(back, fine, 1 / 128))
    assert errs[0] > errs[1] > errs[2]


def test_interpolate_periodic_exact_on_nodes():
    g = np.random.default_rng(0).random((8, 8))
    np.testing.assert_allclose(pat.interpolate_periodic(g, 32)[::4, ::4], g)
    np.testing.assert_allclose(pat.interpolate_periodic(g, 8), g)


# ---------------------------------------------------------------- optimal grid

def clustered_field(n=64):
    x = np.arange(n) / n
    X, Y = np.meshgrid(x, x, indexing="ij")
    rho = np.zeros((n, n))
    for cx, cy in ((0.3, 0.3), (0.7, 0.6), (0.4, 0.8)):
        d2 = np.minimum(abs(X - cx), 1 - abs(X - cx)) ** 2 + np.minimum(abs(Y - cy), 1 - abs(Y - cy)) ** 2
        rho += np.exp(-d2 / (2 * 0.05**2))
    rho += 0.05
    return rho / (rho.sum() / n**2)


def test_optimal_grid_u_shape():
    res = pat.optimal_grid(clustered_field(), 3000, 0)
    hs = sorted(res.errors)
    errs = np.array([res.errors[h] for h in hs])
    i = int(np.argmin(errs))
    assert 0 < i < len(hs) - 1
    assert errs[0] > errs[i] and errs[-1] > errs[i]
    assert res.h_tilde == hs[i]


def test_optimal_grid_refines_with_more_points():
    rho = clustered_field()
    h500 = np.mean([pat.optimal_grid(rho, 500, s).h_tilde for s in range(3)])
    h5000 = np.mean([pat.optimal_grid(rho, 5000, s).h_tilde for s in range(3)])
    assert h5000 < h500


def test_optimal_grid_candidates():
    rho = smooth_field(32)
    assert pat.optimal_grid(rho, 100, 0, candidates=[0.25]).h_tilde == 0.25
    with pytest.raises(EmptyCandidates):
        pat.optimal_grid(rho, 100, 0, candidates=[])
    c = pat.default_candidates()
    assert c[0] == 1 / 8 and round(1 / c[-1]) == 148 and len(c) == 36


# ---------------------------------------------------------------- signatures

def test_signature_constant_field():
    s = pat.signature(np.full((4, 4), 2.5), n_b=4)
    np.testing.assert_array_equal(s.w, [0, 0, 0, 16])
    np.testing.assert_allclose(s.p, [0.625, 1.25, 1.875, 2.5])


def test_signature_toy_layout():
    # 13 x 13 grid with maximum 85 and 4 bins
    rng = np.random.default_rng(10)
    rho = rng.integers(0, 86, (13, 13)).astype(float)
    rho[6, 6] = 85.0
    s = pat.signature(rho, n_b=4)
    np.testing.assert_allclose(s.p, [21.25, 42.5, 63.75, 85.0])
    ref = [np.sum(rho <= 21.25), np.sum((rho > 21.25) & (rho <= 42.5)),
           np.sum((rho > 42.5) & (rho <= 63.75)), np.sum(rho > 63.75)]
    np.testing.assert_array_equal(s.w, ref)
    assert s.total == 169
    # a value exactly on an edge belongs to the lower bin
    edge = np.array([[21.25, 85.0], [0.0, 42.5]])
    np.testing.assert_array_equal(pat.signature(edge, n_b=4).w, [2, 1, 0, 1])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 40))
def test_signature_invariants(seed, n):
    rho = np.random.default_rng(seed).lognormal(size=(n, n))
    s = pat.signature(rho)
    assert s.total == n * n
    assert np.all(np.diff(s.p) > 0)
    assert s.p[-1] == s.M_max == rho.max()


def test_signature_degenerate():
    with pytest.raises(DegenerateField):
        pat.signature(np.zeros((4, 4)))


def test_freedman_diaconis():
    vals = np.random.default_rng(1).random(10_000)
    iqr = np.subtract(*np.percentile(vals, [75, 25]))
    assert pat.freedman_diaconis_bins(vals, 1.0) == math.ceil(1.0 / (2 * iqr * 10_000 ** (-1 / 3)))
    assert pat.freedman_diaconis_bins(np.ones(64), 1.0) == 7  # Sturges fallback


# ---------------------------------------------------------------- EMD

def random_signature(rng, total=None, nmax=8):
    m = int(rng.integers(1, nmax + 1))
    p = np.sort(rng.uniform(0, 10, m))
    p = np.unique(p)
    w = rng.integers(1, 20, p.size).astype(float)
    if total is not None:
        w = w / w.sum() * total
    return pat.Signature(p, w, float(p[-1]))


def generic_lp(P, Q):
    """Balanced transportation LP with equality marginals."""
    m, n = P.n_b, Q.n_b
    c = np.abs(P.p[:, None] - Q.p[None, :]).ravel()
    A = np.zeros((m + n, m * n))
    for i in range(m):
        A[i, i * n:(i + 1) * n] = 1
    for j in range(n):
        A[m + j, j::n] = 1
    res = optimize.linprog(c, A_eq=A, b_eq=np.concatenate([P.w, Q.w]), bounds=(0, None), method="highs")
    return res.fun / P.w.sum()


def test_emd_fast_path_equals_lp():
    rng = np.random.default_rng(7)
    for _ in range(200):
        P = random_signature(rng, total=100.0)
        Q = random_signature(rng, total=100.0)
        assert pat.emd(P, Q) == pytest.approx(generic_lp(P, Q), abs=1e-9)
        assert pat.emd_lp(P, Q) == pytest.approx(generic_lp(P, Q), abs=1e-9)


def test_emd_examples():
    P = pat.Signature(np.array([2.0]), np.array([5.0]), 2.0)
    Q = pat.Signature(np.array([7.5]), np.array([5.0]), 7.5)
    assert pat.emd(P, Q) == pytest.approx(5.5)
    rng = np.random.default_rng(0)
    S = random_signature(rng)
    assert pat.emd(S, S) == 0.0


def test_emd_unequal_totals_uses_partial_flow():
    P = pat.Signature(np.array([1.0, 3.0]), np.array([2.0, 2.0]), 3.0)
    Q = pat.Signature(np.array([3.0]), np.array([1.0]), 3.0)
    assert pat.emd(P, Q) == pytest.approx(0.0, abs=1e-12)


def test_emd_metric_properties():
    rng = np.random.default_rng(11)
    for _ in range(100):
        A, B, C = (random_signature(rng, total=50.0) for _ in range(3))
        ab, ba = pat.emd(A, B), pat.emd(B, A)
        assert ab == pytest.approx(ba, abs=1e-12)
        assert ab <= pat.emd(A, C) + pat.emd(C, B) + 1e-12
        assert ab >= 0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_emd_invariant_under_cell_permutation(seed):
    rng = np.random.default_rng(seed)
    a = rng.lognormal(size=(16, 16))
    b = rng.lognormal(size=(16, 16))
    perm = rng.permutation(a.size)
    a2 = a.ravel()[perm].reshape(a.shape)
    assert pat.emd(pat.signature(a2), pat.signature(b)) == pat.emd(pat.signature(a), pat.signature(b))
    shifted = np.roll(a, (3, 5), axis=(0, 1))
    assert pat.emd(pat.signature(shifted), pat.signature(b)) == pat.emd(pat.signature(a), pat.signature(b))


# ---------------------------------------------------------------- DFT sizes

def planted(n, modes, amp=0.3):
    x = np.arange(n) / n
    X, Y = np.meshgrid(x, x, indexing="ij")
    rho = np.ones((n, n))
    for a, b in modes:
        rho += amp * np.cos(2 * np.pi * (a * X + b * Y))
    return rho


def test_dft_single_mode_along_omega():
    S1, S2 = pat.dft_pattern_sizes(planted(64, [(4, 4)]))
    assert S1 == pytest.approx(1 / math.hypot(4, 4))
    assert S2 == 0.0


def test_dft_uniform():
    assert pat.dft_pattern_sizes(np.ones((32, 32))) == (0.0, 0.0)
    tiny = planted(32, [(2, 2)], amp=1e-5)
    assert pat.dft_pattern_sizes(tiny) == (0.0, 0.0)


def test_dft_two_orthogonal_modes():
    n = 64
    S1, S2 = pat.dft_pattern_sizes(planted(n, [(3, 3), (-5, 5)]))
    k1, k2 = 1 / S1, 1 / S2
    assert abs(k1 - math.hypot(3, 3)) <= 1.0
    assert abs(k2 - math.hypot(5, 5)) <= 1.0


def test_dft_rotation_equivariance():
    n = 64
    rho = planted(n, [(6, 0), (0, 2)], amp=0.2) + planted(n, [(0, 2)], amp=0.1) - 1
    om = (1.0, 0.0)
    S = pat.dft_pattern_sizes(rho, om)
    # rotate the field by pi/2: (a, b) -> (-b, a), and the direction with it
    rot = planted(n, [(0, 6), (-2, 0)], amp=0.2) + planted(n, [(-2, 0)], amp=0.1) - 1
    R = pat.dft_pattern_sizes(rot, (0.0, 1.0))
    assert R == pytest.approx(S)
    # keeping Omega0 fixed while rotating the field swaps the two sizes
    Sw = pat.dft_pattern_sizes(rot, om)
    assert Sw == pytest.approx((S[1], S[0]))


# ---------------------------------------------------------------- compare

def test_compare_pipeline():
    p = continuum_params()
    n = 64
    macro = MacroField(0.0, clustered_field(n), uniform_field(n, p).Omega)
    rng = np.random.default_rng(3)
    Z = sample_points(macro.rho, 2000, rng)
    micro = ParticleState(0.0, np.zeros((0, 2)), np.zeros((0, 2)), Z, np.zeros(2000))
    rep = pat.compare(macro, micro, 2000, 0)
    assert rep.h_tilde in pat.default_candidates()
    assert rep.emd >= 0 and rep.l2 >= 0 and rep.N_used == 2000
    far = ParticleState(0.0, np.zeros((0, 2)), np.zeros((0, 2)), rng.random((2000, 2)), np.zeros(2000))
    assert pat.compare(macro, far, 2000, 0).emd > rep.emd
    row = rep.to_row("abc", 0.5)
    assert list(row) == list(pat.ComparisonReport.CSV_COLUMNS)


def test_compare_stage_errors():
    p = continuum_params()
    macro = uniform_field(16, p)
    micro = ParticleState(0.0, np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(pat.StageError) as info:
        pat.compare(macro, micro, 100, 0)
    assert info.value.stage == "pic_deposit"
    with pytest.raises(pat.StageError) as info:
        pat.compare(macro, micro, 100, 0, candidates=[])
    assert info.value.stage == "optimal_grid"
