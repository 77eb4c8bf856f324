import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import bump_field, mode_field, mode_symbol, rel_l2
from fracheat.core import DomainError, Field, NumericalError, SpaceTimeGrid, make_params, norms, parabolic_rescale, trig_interpolate
from fracheat.fracop import (
    Multiplier,
    SingularQuadRule,
    apply_extension_route,
    apply_power,
    apply_singular,
    apply_spectral,
    calibrate_neumann,
    consistency_report,
    correction_exponents,
    neumann_constant_exact,
    oracle_singular,
    reciprocal_gamma_neg,
    richardson_weights,
    singular_symbol,
)

S_SET = [0.1, 0.25, 0.5, 0.75, 0.9]


# --- multiplier -------------------------------------------------------------------


@pytest.mark.parametrize("s", S_SET)
def test_multiplier_branch_and_symmetry(s):
    g = SpaceTimeGrid(1, 8.0, 16, 4.0, 16)
    m = Multiplier(make_params(s), g).table
    assert m[0, 0] == 0
    arg = np.angle(m[np.abs(m) > 0])
    assert np.all(np.abs(arg) <= s * math.pi / 2 + 1e-14)
    # m(-xi, -tau) = conj m(xi, tau), away from the (real) Nyquist bins
    for i in range(1, 8):
        for k in range(1, 8):
            assert m[-i, -k] == pytest.approx(np.conj(m[i, k]), abs=1e-14)


def test_multiplier_sign_of_argument_follows_tau():
    g = SpaceTimeGrid(1, 2 * math.pi, 8, 2 * math.pi, 8)
    mult = Multiplier(make_params(0.5), g)
    tau = mult.tau.ravel()
    m = mult.table[1]
    for k in range(1, 4):
        # tau >= 0 gives arg in [-s pi/2, 0], tau < 0 gives (0, s pi/2]
        assert (np.angle(m[k]) <= 0) == (tau[k] >= 0)


def test_spectral_kills_constants(ref_grid):
    f = Field(ref_grid, np.full(ref_grid.shape, 2.0), real=True)
    assert apply_spectral(f, make_params(0.3)).sup() == 0.0


@pytest.mark.parametrize("s", S_SET)
@pytest.mark.parametrize("kx,kt", [(1, 0), (0, 1), (2, -3), (5, 7)])
def test_spectral_single_mode_closed_form(ref_grid, s, kx, kt):
    phase = 0.4
    f = mode_field(ref_grid, kx, kt, phase)
    m = mode_symbol(ref_grid, kx, kt, s)
    X, T = ref_grid.mesh()
    expect = (m * np.exp(1j * (2 * np.pi * kx * X / ref_grid.L + 2 * np.pi * kt * T / ref_grid.T + phase))).real
    out = apply_spectral(f, make_params(s))
    assert out.real
    assert np.abs(out.values - expect).max() <= 1e-12 * max(1.0, abs(m))


def _spectral_heat_operator(f: Field) -> np.ndarray:
    g = f.grid
    c = np.fft.fft2(f.values.real)
    xi = 2 * np.pi * np.fft.fftfreq(g.Nx, d=g.hx)
    om = 2 * np.pi * np.fft.fftfreq(g.Nt, d=g.ht)
    om[g.Nt // 2] = 0.0  # odd derivative: drop the unpaired Nyquist bin
    return np.fft.ifft2(c * (xi[:, None] ** 2 + 1j * om[None, :])).real


def test_power_one_is_heat_operator(ref_grid):
    f = bump_field(ref_grid)
    out = apply_power(f, 1.0)
    ref = _spectral_heat_operator(f)
    assert np.abs(out.values - ref).max() <= 1e-10 * np.abs(ref).max()


def test_power_rejects_nonpositive():
    with pytest.raises(DomainError):
        apply_power(Field.zeros(SpaceTimeGrid(1, 1.0, 4, 1.0, 4)), 0.0)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1), st.sampled_from(S_SET))
def test_spectral_is_linear(alpha, beta, seed, s):
    rng = np.random.default_rng(seed)
    g = SpaceTimeGrid(1, 4.0, 16, 2.0, 8)
    f = Field(g, rng.normal(size=g.shape), real=True)
    h = Field(g, rng.normal(size=g.shape), real=True)
    p = make_params(s)
    lhs = apply_spectral(alpha * f + beta * h, p)
    rhs = alpha * apply_spectral(f, p) + beta * apply_spectral(h, p)
    assert np.abs(lhs.values - rhs.values).max() <= 1e-12 * max(1.0, lhs.sup())


@given(st.floats(0.05, 0.45), st.floats(0.05, 0.45), st.integers(0, 2**31 - 1))
def test_multiplier_semigroup(s1, s2, seed):
    rng = np.random.default_rng(seed)
    g = SpaceTimeGrid(1, 4.0, 16, 2.0, 8)
    c = np.fft.fft2(rng.normal(size=g.shape))
    # the Nyquist bins keep only the real part of the symbol, which is not multiplicative
    c[g.Nx // 2, :] = 0.0
    c[:, g.Nt // 2] = 0.0
    f = Field(g, np.fft.ifft2(c).real, real=True)
    lhs = apply_spectral(apply_spectral(f, make_params(s1)), make_params(s2))
    rhs = apply_spectral(f, make_params(s1 + s2))
    assert np.abs(lhs.values - rhs.values).max() <= 1e-10 * max(1.0, rhs.sup())


@pytest.mark.parametrize("r", [2.0, 4.0])
@pytest.mark.parametrize("s", [0.25, 0.5, 0.75])
def test_scaling_law(r, s):
    g = SpaceTimeGrid(1, 2 * math.pi, 32, 2 * math.pi, 128)
    X, T = g.mesh()
    # band-limited: after rescaling by 4 the modes sit at |k_x| <= 8, |k_t| <= 48
    f = Field(g, np.cos(X + 2 * T) + 0.5 * np.sin(2 * X - T) + 0.25 * np.cos(3 * T), real=True)
    p = make_params(s)
    lhs = apply_spectral(parabolic_rescale(f, r), p)
    rhs = r ** (2 * s) * parabolic_rescale(apply_spectral(f, p), r)
    assert np.abs(lhs.values - rhs.values).max() <= 1e-8 * rhs.sup()


@pytest.mark.parametrize("s", [0.25, 0.5, 0.75])
def test_time_independent_reduction_spectral(ref_grid, s):
    X, _ = ref_grid.mesh()
    g = np.exp(-((X - 4.0) ** 2))
    out = apply_spectral(Field(ref_grid, g, real=True), make_params(s)).values.real
    assert np.abs(out - out[:, :1]).max() <= 1e-13
    xi = 2 * np.pi * np.fft.fftfreq(ref_grid.Nx, d=ref_grid.hx)
    expect = np.fft.ifft(np.abs(xi) ** (2 * s) * np.fft.fft(g[:, 0])).real
    assert np.abs(out[:, 0] - expect).max() <= 1e-12


# --- hypersingular route ------------------------------------------------------------------


@given(st.floats(0.01, 0.99))
def test_reciprocal_gamma_is_negative(s):
    assert reciprocal_gamma_neg(make_params(s)) < 0


def test_quad_rule_defaults_and_grading():
    p = make_params(0.75)
    rule = SingularQuadRule.default(p, T_cut=4.0)
    assert rule.grading == pytest.approx(8.0) and rule.K == 200
    assert SingularQuadRule.default(make_params(0.2), 1.0).grading == 2.5
    assert SingularQuadRule.default(make_params(0.1), 1.0).grading == pytest.approx(2 / 0.9)
    e = rule.edges()
    assert e[0] == 0 and e[-1] == pytest.approx(4.0) and np.all(np.diff(e) > 0)
    # near zero the spacing scales like node^(1 - 1/grading), i.e. the mesh is graded
    k = np.arange(1, 10)
    assert np.allclose(e[k], 4.0 * (k / 200) ** 8.0)
    u, w, nj = rule.nodes(0.75)
    assert np.all(u > 0) and np.all(np.diff(np.sort(u)) > 0) and nj == rule.gauss


def test_for_grid_rule_grows_with_resolution():
    p = make_params(0.1)
    coarse = SingularQuadRule.for_grid(p, SpaceTimeGrid(1, 8.0, 64, 4.0, 32))
    fine = SingularQuadRule.for_grid(p, SpaceTimeGrid(1, 8.0, 256, 4.0, 128))
    assert 200 <= coarse.K < fine.K


@pytest.mark.parametrize("kw", [{"T_cut": 0.0, "grading": 2.0}, {"T_cut": 1.0, "grading": 0.5}, {"T_cut": 1.0, "grading": 2.0, "K": 0}])
def test_quad_rule_validation(kw):
    with pytest.raises(DomainError):
        SingularQuadRule(**kw)


def test_singular_kills_constants(ref_grid):
    f = Field(ref_grid, np.full(ref_grid.shape, 7.0), real=True)
    assert apply_singular(f, make_params(0.4)).sup() <= 1e-12


@pytest.mark.parametrize("s", S_SET)
def test_singular_matches_spectral_on_modes(ref_grid, s):
    p = make_params(s)
    for kx, kt in [(1, 1), (3, -2), (8, 5)]:
        f = mode_field(ref_grid, kx, kt)
        sup, _ = norms(apply_singular(f, p), apply_spectral(f, p))
        assert sup <= 1e-4


@pytest.mark.parametrize("s", S_SET)
def test_singular_symbol_close_to_power(s):
    p = make_params(s)
    lam = np.array([0.5 + 0.0j, 1 + 1j, 10 - 30j, 400 + 5j])
    rule = SingularQuadRule.for_grid(p, SpaceTimeGrid(1, 8.0, 64, 4.0, 32))
    got = singular_symbol(lam, p, rule)
    assert np.allclose(got, lam**s, rtol=1e-6, atol=0)


def test_singular_sign_convention(ref_grid):
    # pins the sign: a pure spatial cosine is multiplied by the POSITIVE number |xi|^(2s)
    X, _ = ref_grid.mesh()
    xi = 2 * np.pi * 2 / ref_grid.L
    f = Field(ref_grid, np.cos(xi * X), real=True)
    for s in (0.3, 0.7):
        out = apply_singular(f, make_params(s)).values.real
        ratio = out[f.values.real > 0.5] / f.values.real[f.values.real > 0.5]
        assert np.all(ratio > 0)
        assert np.allclose(ratio, xi ** (2 * s), rtol=1e-6)


def test_singular_time_independent_reduction(ref_grid):
    X, _ = ref_grid.mesh()
    g = np.exp(-((X - 4.0) ** 2))
    p = make_params(0.6)
    out = apply_singular(Field(ref_grid, g, real=True), p).values.real
    assert np.abs(out - out[:, :1]).max() <= 1e-10
    xi = 2 * np.pi * np.fft.fftfreq(ref_grid.Nx, d=ref_grid.hx)
    expect = np.fft.ifft(np.abs(xi) ** (1.2) * np.fft.fft(g[:, 0])).real
    assert np.abs(out[:, 0] - expect).max() <= 1e-6 * np.abs(expect).max()


def test_singular_reports_nonconvergence(ref_grid):
    p = make_params(0.9)
    crude = SingularQuadRule(T_cut=ref_grid.T, grading=1.0, K=2, gauss=1)
    with pytest.raises(NumericalError) as info:
        apply_singular(mode_field(ref_grid, 8, 9), p, rule=crude, tol=1e-12)
    est = info.value.estimates
    assert {"coarse", "fine", "relative_gap"} <= set(est)
    assert isinstance(est["coarse"], Field) and isinstance(est["fine"], Field)


def test_singular_is_deterministic(ref_grid):
    f = bump_field(ref_grid)
    p = make_params(0.35)
    assert np.array_equal(apply_singular(f, p).values, apply_singular(f, p).values)


# --- extension route -------------------------------------------------------------------------


def test_correction_exponents():
    assert correction_exponents(0.25, 4) == [1.5, 2.0, 3.5, 4.0]


@given(st.floats(0.05, 0.95))
def test_richardson_weights_reproduce_expansion(s):
    ys = [0.1 * 2.0**-k for k in range(5)]
    w = richardson_weights(ys, s, terms=3)
    assert sum(w) == pytest.approx(1.0, abs=1e-10)
    for e in correction_exponents(s, 3):
        assert abs(sum(c * (y / ys[0]) ** e for c, y in zip(w, ys))) <= 1e-9


def test_richardson_needs_enough_heights():
    with pytest.raises(DomainError):
        richardson_weights([0.1, 0.05], 0.5, terms=2)


@pytest.mark.parametrize("probes", [[0.1], [0.1, 0.2], [0.1, -0.05], [0.1, 0.1]])
def test_extension_route_probe_validation(small_grid, probes):
    with pytest.raises(DomainError):
        apply_extension_route(mode_field(small_grid), make_params(0.5), probes)


def test_extension_route_kills_constants(ref_grid):
    f = Field(ref_grid, np.full(ref_grid.shape, 1.5), real=True)
    assert apply_extension_route(f, make_params(0.3)).sup() <= 1e-6


@pytest.mark.parametrize("s", S_SET)
def test_extension_route_matches_spectral_on_modes(ref_grid, s):
    p = make_params(s)
    for kx, kt in [(1, 1), (2, -1), (4, 3)]:
        f = mode_field(ref_grid, kx, kt)
        _, l2 = norms(apply_extension_route(f, p), apply_spectral(f, p))
        assert l2 <= 1e-3


def test_extension_route_half_is_square_root(ref_grid):
    p = make_params(0.5)
    f = bump_field(ref_grid)
    _, l2 = norms(apply_extension_route(f, p), apply_spectral(f, p))
    assert l2 <= 5e-3


@pytest.mark.parametrize("s", S_SET)
def test_calibration_recovers_exact_constant(ref_grid, s):
    p = make_params(s)
    assert calibrate_neumann(p, ref_grid) == pytest.approx(neumann_constant_exact(p), rel=1e-7)


def test_neumann_constant_half():
    assert neumann_constant_exact(make_params(0.5)) == pytest.approx(1.0, abs=1e-15)


# --- oracle --------------------------------------------------------------------------------------


def test_oracle_on_constant(small_grid):
    f = Field(small_grid, np.full(small_grid.shape, 5.0), real=True)
    assert abs(oracle_singular(f, make_params(0.5), (1.0, 0.5))) <= 1e-10


def test_oracle_on_mode(ref_grid):
    s = 0.4
    f = mode_field(ref_grid, 1, 1)
    x, t = 1.3, 0.7
    m = mode_symbol(ref_grid, 1, 1, s)
    expect = (m * np.exp(1j * (2 * np.pi * x / ref_grid.L + 2 * np.pi * t / ref_grid.T))).real
    assert abs(oracle_singular(f, make_params(s), (x, t)) - expect) <= 1e-5


@pytest.mark.slow
def test_oracle_agrees_with_singular_route_on_random_field(ref_grid):
    rng = np.random.default_rng(11)
    X, T = ref_grid.mesh()
    c = rng.normal(size=3)
    f = Field(ref_grid, c[0] * np.exp(-((X - 4) ** 2) - (T - 2) ** 2) + c[1] * np.cos(2 * np.pi * X / 8 + 2 * np.pi * T / 4) + c[2], real=True)
    p = make_params(0.6)
    out = apply_singular(f, p)
    for x, t in rng.uniform([0, 0], [8, 4], size=(3, 2)):
        w = trig_interpolate(out, (np.array([x]), np.array([t])))[0]
        assert abs(oracle_singular(f, p, (x, t)) - w) <= 1e-3 * max(1.0, out.sup())


# --- consistency ------------------------------------------------------------------------------------


def test_consistency_single_mode_half(ref_grid):
    rep = consistency_report(mode_field(ref_grid, 1, 1), make_params(0.5))
    assert rep.max_error("l2_rel") <= 1e-3 and rep.max_error("sup_rel") <= 1e-3
    assert set(rep.outputs) == {"spectral", "singular", "extension"}
    assert "extension" in rep.calibration


def test_consistency_zero_field(small_grid):
    rep = consistency_report(Field.zeros(small_grid), make_params(0.5))
    assert all(out.sup() == 0 for out in rep.outputs.values())
    assert rep.max_error("l2_rel") == 0.0 and rep.max_error("sup_rel") == 0.0


@pytest.mark.parametrize("s", [0.25, 0.75])
def test_consistency_bump(ref_grid, s):
    rep = consistency_report(bump_field(ref_grid), make_params(s))
    assert rep.max_error("l2_rel") <= 5e-3


@pytest.mark.parametrize("s", [0.3, 0.8])
def test_all_routes_real(ref_grid, s):
    rep = consistency_report(bump_field(ref_grid), make_params(s))
    for out in rep.outputs.values():
        assert out.real
        assert np.abs(out.values.imag).max() <= 1e-10
