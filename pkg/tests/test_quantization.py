import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twomicro.lattice import PrimitiveModule, saturate
from twomicro.quantization import (
    BoxEscapeError,
    Cutoff,
    FourierState,
    Symbol,
    apply,
    average_symbol,
    commutator_defect,
    matrix_element,
    nested_twomicro_pair,
    operator_matrix,
    sqrt_symbol_defect,
    twomicro_pair,
    wigner_pair,
)
from twomicro._modes import box_modes


def gauss_xi(d, center=0.3):
    return Symbol.of_xi(d, {"kind": "gauss", "center": [center] * d, "width": 0.5})


def eta_symbol(lam, direction):
    d = lam.dim
    modes = [list(b) for b in lam.basis] + [[0] * d]
    return Symbol.from_config({
        "xmode": modes, "coef": [0.7] * len(modes), "real": True,
        "xi_profile": {"kind": "poly", "terms": [{"exp": [1] + [0] * (d - 1), "coef": 1.0}, {"exp": [0] * d, "coef": 2.0}]},
        "eta_profile": {"kind": "homogeneous", "const": 0.3, "direction": direction},
        "R0": 2.0,
    }, d, module=lam)


def test_matrix_element_examples():
    one = Symbol.constant(2)
    assert matrix_element(one, 0.1, (1, 2), (1, 2)) == 1
    assert matrix_element(one, 0.1, (1, 2), (0, 2)) == 0
    m = Symbol.xmode((1, -1))
    assert matrix_element(m, 0.1, (3, 0), (2, 1)) == 1
    assert matrix_element(m, 0.1, (3, 0), (2, 0)) == 0
    g = gauss_xi(2)
    k = np.array([4, -2])
    want = np.exp(-np.sum((0.1 * k - 0.3) ** 2) / (2 * 0.25))
    assert abs(matrix_element(g, 0.1, k, k) - want) < 1e-15
    assert matrix_element(g, 0.1, k, k + 1) == 0


def test_apply_examples():
    rng = np.random.default_rng(0)
    u = FourierState.random(2, 3, rng)
    v = apply(Symbol.constant(2), 0.2, u)
    assert np.allclose(v.coeffs, u.coeffs) and np.array_equal(v.modes, u.modes)
    w = apply(Symbol.xmode((1, 0)), 0.2, FourierState.plane_wave((2, 5)))
    assert w.as_dict() == {(3, 5): 1}
    g = gauss_xi(2)
    z = apply(g, 0.2, FourierState.plane_wave((2, 5)))
    assert abs(z.coefficient((2, 5)) - matrix_element(g, 0.2, (2, 5), (2, 5))) < 1e-15
    with pytest.raises(BoxEscapeError):
        apply(Symbol.xmode((3, 0)), 0.2, FourierState.plane_wave((2, 5)), max_radius=4)


def test_wigner_pair_xonly_is_density_integral():
    rng = np.random.default_rng(1)
    u = FourierState.random(1, 6, rng)
    a = Symbol.trig(1, {(0,): 1.5, (2,): 0.25 - 0.5j, (-2,): 0.25 + 0.5j})
    M = 64
    x = 2 * np.pi * np.arange(M)[:, None] / M
    quad = 2 * np.pi / M * np.sum(np.real(a.evaluate(x, np.zeros_like(x))) * np.abs(u.evaluate(x)) ** 2)
    assert abs(wigner_pair(u, a, 0.3) - quad) < 1e-12


def test_wigner_pair_plane_wave_and_zero():
    g = gauss_xi(2)
    k0 = (3, -1)
    assert abs(wigner_pair(FourierState.plane_wave(k0), g, 0.125) - matrix_element(g, 0.125, k0, k0)) < 1e-15
    assert wigner_pair(FourierState.zeros(2), g, 0.125) == 0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_real_symbols_give_hermitian_matrices(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 3))
    a = Symbol.from_config({"xmode": [[int(v) for v in rng.integers(-2, 3, d)]],
                            "coef": [[float(rng.standard_normal()), float(rng.standard_normal())]], "real": True,
                            "xi_profile": {"kind": "gauss", "center": [0.1] * d, "width": 0.7}}, d)
    box = box_modes(d, 3)
    A = operator_matrix(a, 0.25, box)
    assert np.abs(A - A.conj().T).max() < 1e-14
    u = FourierState.random(d, 3, rng)
    assert abs(wigner_pair(u, a, 0.25).imag) < 1e-13


def test_commutator_examples():
    poly = Symbol.from_config({"xmode": [[1, -2]], "xi_profile": {"kind": "poly", "terms": [{"exp": [2, 1], "coef": 1.0}]}}, 2)
    assert commutator_defect(poly, 0.125, 6) < 1e-10
    assert commutator_defect(gauss_xi(2), 0.125, 6) == 0
    assert commutator_defect(Symbol.cos((1, 1), 2.0), 1 / 64, 8) < 1e-10


def test_average_symbol_examples():
    c = Symbol.cos((1, 0))
    kept = average_symbol(c, saturate([(1, 0)]))
    assert set(kept.terms) == set(c.terms)
    assert average_symbol(c, saturate([(0, 1)])).is_zero()
    one = average_symbol(Symbol.constant(2), saturate([(1, 1)]))
    assert set(one.terms) == {(0, 0)}
    again = average_symbol(kept, saturate([(1, 0)]))
    assert set(again.terms) == set(kept.terms)


@pytest.mark.parametrize("lam", [saturate([(1, 0)]), saturate([(1, 1)]), saturate([(2, -1)])])
def test_inner_plus_outer_is_uncut(lam):
    rng = np.random.default_rng(2)
    a = eta_symbol(lam, [0.6, -0.8])
    for _ in range(5):
        u = FourierState.random(2, 6, rng)
        for h in (1 / 8, 1 / 32):
            for R in (1.0, 3.0):
                cut = Cutoff(R)
                s = twomicro_pair(u, a, h, cut, "inner") + twomicro_pair(u, a, h, cut, "outer")
                assert abs(s - wigner_pair(u, a, h, eta_module=lam)) < 1e-12


def test_zero_module_outer_vanishes():
    rng = np.random.default_rng(3)
    u = FourierState.random(2, 4, rng)
    zero = PrimitiveModule.zero(2)
    a = gauss_xi(2).with_module(zero)
    assert abs(twomicro_pair(u, a, 0.1, Cutoff(1.0), "outer")) < 1e-15
    assert abs(twomicro_pair(u, a, 0.1, Cutoff(1.0), "inner") - wigner_pair(u, a, 0.1)) < 1e-14


def test_outer_on_perpendicular_plane_wave_vanishes():
    lam = saturate([(1, 1)])
    a = eta_symbol(lam, [1.0, 0.0])
    assert twomicro_pair(FourierState.plane_wave((3, -3)), a, 0.1, Cutoff(2.0), "outer") == 0


def test_twomicro_requires_module():
    with pytest.raises(ValueError):
        twomicro_pair(FourierState.plane_wave((1, 0)), gauss_xi(2), 0.1, Cutoff(1.0), "inner")
    with pytest.raises(ValueError):
        twomicro_pair(FourierState.plane_wave((1, 0)), gauss_xi(2).with_module(saturate([(1, 0)])), 0.1, Cutoff(1.0), "middle")


def test_nested_pair_reduces_and_telescopes():
    rng = np.random.default_rng(4)
    u = FourierState.random(3, 3, rng)
    big = saturate([(1, 0, 0), (0, 1, 0)])
    small = saturate([(1, 0, 0)])
    a = eta_symbol(small, [1.0, 0.0, 0.0])
    cuts = [Cutoff(2.0), Cutoff(1.5)]
    one = nested_twomicro_pair(u, a, [small], 0.1, cuts[:1], ["inner"])
    assert abs(one - twomicro_pair(u, a, 0.1, cuts[0], "inner")) < 1e-15
    total = sum(nested_twomicro_pair(u, a, [big, small], 0.1, cuts, list(s))
                for s in [("inner", "inner"), ("inner", "outer"), ("outer", "inner"), ("outer", "outer")])
    assert abs(total - wigner_pair(u, a, 0.1, eta_module=small)) < 1e-12
    wide = [Cutoff(50.0), Cutoff(50.0)]
    assert abs(nested_twomicro_pair(u, a, [big, small], 0.1, wide, ["inner", "inner"]) - wigner_pair(u, a, 0.1, eta_module=small)) < 1e-12
    with pytest.raises(ValueError, match="strictly decreasing"):
        nested_twomicro_pair(u, a, [small, big], 0.1, cuts, ["inner", "inner"])


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 10.0), st.lists(st.floats(-30, 30), min_size=2, max_size=2))
def test_cutoff_properties(R, v):
    c = Cutoff(R)
    val = float(c.chi(np.array(v)))
    assert 0.0 <= val <= 1.0
    assert abs(float(c.sqrt_chi(np.array(v))) ** 2 - val) < 1e-15
    r = np.linalg.norm(v)
    if r >= 2 * R:
        assert val == 0.0
    if r <= R:
        assert val == 1.0
    assert float(c.chi(np.zeros(2))) == 1.0


def test_sqrt_defect_constant():
    assert sqrt_symbol_defect(Symbol.constant(1, 4.0), 0.1, 8) < 1e-10


def test_sqrt_defect_xonly_is_exact():
    # for a(x) only, Op_h(√a)² = Op_h(a) exactly; only FFT round-off remains
    a = Symbol.trig(1, {(0,): 2.0, (1,): 0.5, (-1,): 0.5})
    vals = [sqrt_symbol_defect(a, h, 12) for h in (1 / 8, 1 / 16, 1 / 32)]
    assert max(vals) < 1e-10


def test_sqrt_defect_decreases_in_h_for_xi_dependent_symbol():
    a = Symbol.from_config({"xmode": [[0], [1]], "coef": [2.0, 0.5], "real": True,
                            "xi_profile": {"kind": "gauss", "center": [0.0], "width": 0.5}}, 1)
    a = a + Symbol.constant(1, 0.5)
    vals = [sqrt_symbol_defect(a, h, 12) for h in (1 / 8, 1 / 16, 1 / 32)]
    assert vals[0] > vals[1] > vals[2]


def test_sqrt_defect_trend_in_R():
    a = Symbol.trig(1, {(0,): 2.0, (1,): 0.5, (-1,): 0.5})
    vals = [sqrt_symbol_defect(a, 0.1, 24, R=R) for R in (2.0, 4.0, 8.0)]
    assert vals[0] > vals[1] > vals[2]


def test_sqrt_defect_refuses_negative_symbols():
    with pytest.raises(ValueError, match="negative"):
        sqrt_symbol_defect(Symbol.trig(1, {(0,): -1.0}), 0.1, 4)


def test_state_json_round_trip_and_box_escape():
    rng = np.random.default_rng(5)
    u = FourierState.random(2, 2, rng)
    v = FourierState.from_json(u.to_json())
    assert np.array_equal(u.modes, v.modes) and np.array_equal(u.coeffs, v.coeffs)
    with pytest.raises(BoxEscapeError):
        u.on_modes(box_modes(2, 1))


def test_symbol_config_round_trip():
    cfg = {"xmode": [[1, 0]], "coef": [[0.5, 0.25]], "real": True, "xi_profile": {"kind": "gauss", "center": [0, 0], "width": 1.0}}
    a = Symbol.from_config(cfg, 2)
    b = Symbol.from_config(a.to_config(), 2)
    xi = np.array([[0.2, -0.1]])
    for m in a.terms:
        assert a.terms[m](xi, xi) == b.terms[m](xi, xi)


def test_module_tag_is_enforced():
    with pytest.raises(ValueError, match="tagged module"):
        Symbol.cos((1, 1)).with_module(saturate([(1, 0)]))
