import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from swarmobs import ModelParams, continuum_params
from swarmobs.alignment import compute_alignment_coeffs
from swarmobs.potentials import compute_c0, phi_hat
from swarmobs import stability as stab
from swarmobs.stability import BaseState

P = continuum_params(kappa=1000.0, zeta=0.5, mu=4e-3)
C0 = compute_c0(0.15, 5.0)[0]


def test_F_G_examples():
    assert stab.F_of(0.0, P) == 0.0
    assert stab.G_of(0.0, P) == 1.0
    z = np.linspace(0.5, 300, 200)
    assert np.all(stab.G_of(z, P) > 1.0)


@pytest.mark.parametrize("factor,sign", [(1 - 1e-6, 1), (1 + 1e-6, -1)])
def test_F_sign_at_zstar_flips_at_c0(factor, sign):
    c0, zs = compute_c0(0.15, 5.0)
    p = continuum_params(kappa=100.0, mu=factor * c0 / 100.0)
    assert np.sign(stab.F_of(zs, p)) == sign


def test_dispersion_zero_wave_vector():
    r = stab.dispersion((0.0, 0.0), P)
    assert r.roots == (0j, 0j) or all(abs(x) == 0 for x in r.roots)
    assert not r.stable


def test_parallel_stable_above_threshold():
    p = continuum_params(kappa=100.0, mu=1.2 * C0 / 100.0)
    base = BaseState()
    for z in (1.0, 10.0, 20.5, 40.0, 200.0):
        r = stab.dispersion((z * base.Omega0[0], z * base.Omega0[1]), p, base)
        assert r.branch in (stab.CASE_A1, stab.CASE_A2)
        assert all(x.real < 0 for x in r.roots) and r.stable


def test_case_a_closed_form():
    c = compute_alignment_coeffs(P.ds_over_nu, P.rA, P.u0)
    base = BaseState.at_angle(0.3)
    z = 17.0
    r = stab.dispersion((z * math.cos(0.3), z * math.sin(0.3)), P, base, c)
    F, G = stab.F_of(z, P), stab.G_of(z, P)
    a1 = -1j * c.d1 * z / G + F / G
    a2 = -1j * c.d2 * z - z * z * c.gamma_s
    assert sorted(r.roots, key=lambda x: x.imag) == pytest.approx(sorted([a1, a2], key=lambda x: x.imag))


def test_bifurcation_parameter_values():
    expected = {0.02: 0.0036, 0.2: 0.0357, 0.5: 0.0893, 1: 0.1785, 4: 0.7142, 6: 1.0713}
    for mk, bp in expected.items():
        p = continuum_params(kappa=1000.0, mu=mk / 1000.0)
        # printed values carry 4 decimals
        assert stab.bifurcation_parameter(p) == pytest.approx(bp, rel=1e-3, abs=5e-5)
    assert stab.bifurcation_parameter(P.replace(mu=0.0)) == 0.0


def quadratic_residual(r):
    c = compute_alignment_coeffs(P.ds_over_nu, P.rA, P.u0)
    z = math.hypot(*r.k)
    F, G = stab.F_of(z, P), stab.G_of(z, P)
    a, b, cc = stab.quadratic_coefficients(r.k0, r.k1, F, G, c)
    out = []
    for x in r.roots:
        terms = [abs(a * x * x), abs(b * x), abs(cc)]
        out.append(abs(a * x * x + b * x + cc) / max(terms))
    return max(out)


@settings(max_examples=60, deadline=None)
@given(kx=st.floats(-400, 400), ky=st.floats(-400, 400))
def test_case_b_residual_and_hermitian_symmetry(kx, ky):
    if math.hypot(kx, ky) < 1e-6:
        return
    r = stab.dispersion((kx, ky), P)
    m = stab.dispersion((-kx, -ky), P)
    if r.branch == stab.CASE_B:
        assert quadratic_residual(r) < 1e-10
    a = sorted(r.roots, key=lambda x: (round(x.real, 9), x.imag))
    b = sorted((x.conjugate() for x in m.roots), key=lambda x: (round(x.real, 9), x.imag))
    scale = max(1.0, max(abs(x) for x in r.roots))
    np.testing.assert_allclose(np.array(a), np.array(b), atol=1e-9 * scale)


@pytest.mark.parametrize("z", [3.0, 22.97, 80.0])
def test_case_continuity(z):
    base = BaseState()
    o, q = np.array(base.Omega0), np.array(base.perp)
    a = stab.dispersion(z * o, P, base)
    b = stab.dispersion(z * o + 1e-8 * q, P, base)
    assert a.branch != stab.CASE_B and b.branch == stab.CASE_B
    ra = sorted(a.roots, key=lambda x: x.imag)
    rb = sorted(b.roots, key=lambda x: x.imag)
    for x, y in zip(ra, rb):
        assert abs(x - y) <= 1e-6 * max(1.0, abs(x))


def test_routh_hurwitz_matches_root_signs():
    rng = np.random.default_rng(2024)
    n_coeff, per = 20, 500
    mismatches = 0
    total = 0
    for _ in range(n_coeff):
        c = compute_alignment_coeffs(10 ** rng.uniform(-2, 0), rng.uniform(0.05, 0.3), rng.uniform(0.5, 2))
        tau = rng.uniform(0.05, 0.4)
        Cphi = rng.uniform(0.5, 8)
        mu = 10 ** rng.uniform(-5, -1)
        kappa = 10 ** rng.uniform(1, 3.5)
        zeta = rng.uniform(0.1, 5)
        p = continuum_params(tau=tau, Cphi=Cphi, mu=mu, kappa=kappa, zeta=zeta)
        z = 10 ** rng.uniform(-1, math.log10(60 / tau), per)
        ang = rng.uniform(0, 2 * math.pi, per)
        k0, k1 = z * np.cos(ang), z * np.sin(ang)
        ph = phi_hat(z, tau, Cphi)
        F = stab.F_of(z, p, 1.0, ph)
        G = stab.G_of(z, p, 1.0, ph)
        a, b, cc = stab.quadratic_coefficients(k0, k1, F, G, c)
        r1, r2 = stab.quadratic_roots(a, b, cc)
        rh1, rh2 = stab.routh_hurwitz(k0, k1, F, G, c)
        by_roots = (r1.real < 0) & (r2.real < 0)
        by_rh = (rh1 > 0) & (rh2 > 0)
        mismatches += int(np.sum(by_roots != by_rh))
        total += per
    assert total >= 10_000
    assert mismatches == 0


@settings(max_examples=15, deadline=None)
@given(log_bp=st.floats(-2.5, 1.0), tau=st.floats(0.08, 0.3), zeta=st.floats(0.2, 2.0))
def test_threshold_equivalence(log_bp, tau, zeta):
    bp = 10 ** log_bp
    if abs(bp - 1) < 0.02:
        return
    kappa = 1000.0
    c0 = compute_c0(tau, 5.0)[0]
    p = continuum_params(tau=tau, zeta=zeta, kappa=kappa, mu=bp * c0 / kappa)
    assert stab.bifurcation_parameter(p) == pytest.approx(bp, rel=1e-9)
    c = compute_alignment_coeffs(p.ds_over_nu, p.rA, p.u0)
    z = np.geomspace(1e-2, 60 / tau, 600)
    unstable = False
    for ang in (0.0, math.pi / 6, math.pi / 3, math.pi / 2):
        for zi in z:
            r = stab.dispersion((zi * math.cos(ang + math.pi / 4), zi * math.sin(ang + math.pi / 4)), p,
                                BaseState(), c)
            if r.max_growth > 0:
                unstable = True
                break
        if unstable:
            break
    assert unstable == (bp < 1)


def test_predicted_pattern_band_regime():
    pred = stab.predicted_pattern(P)
    S1, S2, apar, aperp = pred
    assert S1 > 0 and apar > 0
    assert S1 == pytest.approx(2 * math.pi / pred.k_par)
    # restricted to the modes of the unit box there is no perpendicular instability
    lat = stab.predicted_pattern(P, lattice_length=1.0)
    assert lat.S1th > 0 and lat.S2th == 0.0


def test_predicted_pattern_above_threshold():
    p = continuum_params(kappa=1000.0, mu=6e-3)
    assert stab.bifurcation_parameter(p) > 1
    S1, S2, a1, a2 = stab.predicted_pattern(p)
    assert S1 == 0.0 and S2 == 0.0 and a1 <= 0 and a2 <= 0


def test_predicted_pattern_rotation_invariant():
    a = stab.predicted_pattern(P, BaseState.at_angle(0.2))
    b = stab.predicted_pattern(P, BaseState.at_angle(0.2 + math.pi / 3))
    assert (a.S1th, a.S2th) == (b.S1th, b.S2th)


def test_predicted_pattern_scan_size():
    with pytest.raises(ValueError):
        stab.predicted_pattern(P, n_scan=100)


def test_base_state_validation():
    with pytest.raises(ValueError):
        BaseState(1.0, (1.0, 1.0))
    with pytest.raises(ValueError):
        BaseState(0.0)


def test_stability_region_csv(tmp_path):
    plist = [P, P.replace(mu=6e-3)]
    rows = stab.stability_region(plist)
    assert len(rows) == 4
    stab.write_stability_csv(rows, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].split(",") == stab.STABILITY_COLUMNS
    assert len(lines) == 5
