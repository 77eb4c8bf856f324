import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from conftest import bump_field
from fracheat.core import DomainError, Field, SpaceTimeGrid, make_params
from fracheat.kernels import (
    HeatKernelEval,
    convolve_extension,
    delta_limit_check,
    eval_Gamma,
    eval_W,
    extension_constant,
    extension_symbol,
    gamma,
    kernel_mass,
    source_constant,
)

# Reference values computed independently with mpmath (30 digits) and frozen.
GAMMA_REF = {
    0.3: 2.9915689876875907446,
    1.7: 0.90863873285329044156,
    0.25: 3.6256099082219083119,
    0.75: 1.2254167024651776451,
    -0.5: -3.5449077018110320546,
    -0.3: -4.3268511088251927205,
    2.5: 1.3293403881791370205,
}
CONSTANT_REF = {0.25: 0.19503112554470338693, 0.3: 0.22053777068213984994, 0.5: 0.28209479177387814347, 0.75: 0.28851686930823484431}
# symbol G(y; lam) from the closed form 2 (lam/alpha)^(s/2) K_s(2 sqrt(alpha lam)), alpha = y^2/4
SYMBOL_REF = [
    (0.7, 1 + 2j, 0.3, 0.211270293435474051 - 0.156377385381064527j),
    (0.2, 3 - 1j, 0.5, 0.702797053264771471 + 0.0400815489393447906j),
    (1.5, 0.5 + 0.25j, 0.75, 0.454009911738617841 - 0.100627274837713068j),
    (0.05, 40 + 10j, 0.25, 0.482195640150030555 - 0.0281010481042158012j),
]
# |G(y; 1+i) - 1| on the mode exp(i(x+t)) of the 2 pi x 2 pi torus
DELTA_REF = {
    0.5: [0.38439902525703217, 0.213449957971598311, 0.112611004530882161],
    0.3: [0.561123365724946659, 0.38904172028588386, 0.262168193534985122],
}


# --- heat kernel ------------------------------------------------------------------


def test_W_unit_value():
    assert eval_W(0.0, 1 / (4 * math.pi)) == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("t", [-1.0, 0.0])
def test_W_vanishes_for_nonpositive_time(t):
    assert eval_W(np.array([0.0, 1.0, -3.0]), t).tolist() == [0.0, 0.0, 0.0]


def test_W_unit_mass():
    val, _ = quad(lambda x: float(eval_W(x, 1.0)), -60, 60, epsabs=1e-14, limit=200)
    assert val == pytest.approx(1.0, abs=1e-10)


def test_W_two_dimensional_normalization():
    x = np.array([[0.0, 0.0]])
    assert float(HeatKernelEval(2)(x, 0.25)[0]) == pytest.approx(1 / math.pi, rel=1e-15)


@pytest.mark.parametrize("t1,t2", [(0.3, 0.5), (1.0, 0.1), (0.05, 2.0)])
def test_W_semigroup(t1, t2):
    y = np.linspace(-40, 40, 16001)
    dy = y[1] - y[0]
    for x in (0.0, 0.7, -2.3):
        conv = np.sum(eval_W(x - y, t1) * eval_W(y, t2)) * dy
        assert conv == pytest.approx(float(eval_W(x, t1 + t2)), abs=1e-8)


@given(st.floats(-20, 20), st.floats(1e-3, 50))
def test_W_positive(x, t):
    assert eval_W(x, t) > 0 or abs(x) / math.sqrt(t) > 50


# --- gamma function and constants ----------------------------------------------------------


@pytest.mark.parametrize("x", sorted(GAMMA_REF))
def test_gamma_against_reference(x):
    assert gamma(x) == pytest.approx(GAMMA_REF[x], rel=1e-14)


def test_gamma_basic_values():
    assert gamma(0.5) == pytest.approx(math.sqrt(math.pi), rel=1e-15)
    assert gamma(1.0) == pytest.approx(1.0, rel=1e-15)


def test_gamma_pole():
    with pytest.raises(DomainError):
        gamma(-1.0)


@pytest.mark.parametrize("s", sorted(CONSTANT_REF))
def test_extension_constant(s):
    assert extension_constant(make_params(s)) == pytest.approx(CONSTANT_REF[s], rel=1e-14)


@given(st.floats(0.01, 0.99))
def test_source_constant_is_negative(s):
    assert source_constant(make_params(s)) < 0 < extension_constant(make_params(s))


# --- extension kernel ----------------------------------------------------------------------


def test_Gamma_causal():
    p = make_params(0.4)
    assert eval_Gamma(0.3, np.array([0.0, 1.0]), -0.5, p).tolist() == [0.0, 0.0]
    assert eval_Gamma(0.3, 0.0, 0.0, p) == 0.0


@pytest.mark.parametrize("y", [0.0, -1.0])
def test_Gamma_rejects_nonpositive_height(y):
    with pytest.raises(DomainError):
        eval_Gamma(y, 0.0, 1.0, make_params(0.5))


def test_Gamma_half_closed_form():
    p = make_params(0.5)
    c = 1.0 / (2.0 * math.sqrt(math.pi))
    for y, x, t in [(0.3, 0.1, 0.2), (1.0, -0.5, 2.0), (2.0, 1.0, 0.7)]:
        expect = c * y * t**-1.5 * float(eval_W(x, t)) * math.exp(-y * y / (4 * t))
        assert float(eval_Gamma(y, x, t, p)) == pytest.approx(expect, rel=1e-14)


@given(
    st.sampled_from([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]),
    st.floats(1e-3, 5.0),
    st.floats(-5.0, 5.0),
    st.floats(1e-4, 10.0),
)
def test_Gamma_nonnegative(s, y, x, t):
    assert eval_Gamma(y, x, t, make_params(s)) >= 0.0


def test_Gamma_tensor_quadrature_mass():
    # independent check: integrate the kernel itself in x (trapezoid on a wide line) and t (adaptive)
    p = make_params(0.3)
    y = 0.5
    zs = np.linspace(-40, 40, 4001)

    def time_profile(t):
        xs = zs * math.sqrt(t)  # the spatial window follows the heat-kernel width
        return float(np.sum(eval_Gamma(y, xs, t, p)) * (xs[1] - xs[0]))

    total = 0.0
    edges = [0.0, 1e-3, 1e-2, 0.1, 1.0, 10.0, 100.0, 1e4, 1e6]
    for lo, hi in zip(edges, edges[1:]):
        part, _ = quad(time_profile, lo, hi, epsabs=1e-12, epsrel=1e-12, limit=200)
        total += part
    # the part beyond 1e6 is c y^(2s) t^(-s)/s at t = 1e6
    total += extension_constant(p) * y ** (2 * p.s) * 1e6 ** (-p.s) / p.s
    assert total == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("s", [0.1, 0.25, 0.3, 0.5, 0.75, 0.9])
def test_kernel_mass_is_one_and_height_free(s):
    p = make_params(s)
    masses = [kernel_mass(y, p) for y in (0.1, 0.5, 1.0, 10.0)]
    for m in masses:
        assert abs(m - 1.0) <= 1e-8
    assert max(masses) - min(masses) <= 1e-12


def test_kernel_mass_needs_64_nodes():
    with pytest.raises(ValueError):
        kernel_mass(1.0, make_params(0.5), npts=32)


def test_kernel_mass_rejects_bad_height():
    with pytest.raises(DomainError):
        kernel_mass(0.0, make_params(0.5))


# --- symbol and convolution -----------------------------------------------------------------


@pytest.mark.parametrize("y,lam,s,expect", SYMBOL_REF)
def test_extension_symbol_against_bessel_form(y, lam, s, expect):
    assert abs(complex(extension_symbol(y, lam, make_params(s))) - expect) <= 1e-13


def test_extension_symbol_at_zero_is_mass():
    p = make_params(0.35)
    assert complex(extension_symbol(0.8, 0.0, p)) == pytest.approx(kernel_mass(0.8, p), abs=1e-15)


@given(st.floats(0.05, 3.0), st.floats(0.0, 30.0), st.floats(-30.0, 30.0))
def test_extension_symbol_is_conjugate_symmetric_and_contractive(y, xi2, om):
    p = make_params(0.4)
    g1 = complex(extension_symbol(y, xi2 + 1j * om, p))
    g2 = complex(extension_symbol(y, xi2 - 1j * om, p))
    assert abs(g1 - g2.conjugate()) <= 1e-13
    assert abs(g1) <= 1.0 + 1e-12


def test_convolution_of_constant(small_grid):
    f = Field(small_grid, np.full(small_grid.shape, 3.0), real=True)
    errs = delta_limit_check(f, [0.5, 0.25, 0.1], make_params(0.3))
    assert max(errs) <= 1e-6 * 3


def test_delta_limit_on_bump_decreases(ref_grid):
    f = bump_field(ref_grid)
    errs = delta_limit_check(f, [0.5 * 2.0**-k for k in range(6)], make_params(0.5))
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 0.1 * errs[0]


@pytest.mark.parametrize("s", sorted(DELTA_REF))
def test_delta_limit_on_single_mode(s):
    g = SpaceTimeGrid(1, 2 * math.pi, 8, 2 * math.pi, 8)
    X, T = g.mesh()
    f = Field(g, np.exp(1j * (X + T)), real=False)
    errs = delta_limit_check(f, [0.4, 0.2, 0.1], make_params(s))
    assert np.allclose(errs, DELTA_REF[s], rtol=0, atol=1e-12)


def test_delta_limit_rejects_bad_sequence(small_grid):
    f = Field.zeros(small_grid)
    with pytest.raises(DomainError):
        delta_limit_check(f, [0.1, 0.2], make_params(0.5))
    with pytest.raises(DomainError):
        delta_limit_check(f, [0.1, -0.2], make_params(0.5))


def test_convolution_preserves_reality(ref_grid):
    out = convolve_extension(bump_field(ref_grid), 0.3, make_params(0.6))
    assert out.real and np.isrealobj(out.values.real)
