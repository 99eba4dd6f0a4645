import math

import numpy as np
import pytest
import scipy.linalg

from twomicro.dynamics import (
    Potential,
    TimeModulation,
    averaged_propagator,
    free_propagate,
    make_plan,
    propagate,
    propagate_many,
    simpson_weights,
    spectral_cutoff,
    time_averaged_density,
)
from twomicro.lattice import PrimitiveModule, saturate
from twomicro.quantization import BoxEscapeError, FourierState

V1 = Potential.cosines(1, {(1,): 2.0})


def test_free_propagate_examples():
    u = FourierState.plane_wave((3, -1))
    v = free_propagate(u, 0.7)
    assert abs(v.coefficient((3, -1)) - np.exp(-0.5j * 0.7 * 10)) < 1e-15
    rng = np.random.default_rng(0)
    w = FourierState.random(2, 4, rng)
    assert np.array_equal(free_propagate(w, 0.0).coeffs, w.coeffs)
    assert abs(free_propagate(w, 3.3).norm() - w.norm()) < 1e-12


def test_zero_potential_matches_free():
    rng = np.random.default_rng(1)
    u = FourierState.random(2, 3, rng)
    plan = make_plan(Potential.zero(2), 3)
    for t in (0.3, 2.0):
        assert np.abs(propagate(plan, u, t).coeffs - free_propagate(u, t).coeffs).max() < 1e-10


def test_constant_potential_is_a_phase():
    rng = np.random.default_rng(2)
    u = FourierState.random(1, 4, rng)
    plan = make_plan(Potential.zero(1).shifted(0.8), 4)
    t = 1.7
    want = np.exp(-0.8j * t) * free_propagate(u, t).coeffs
    assert np.abs(propagate(plan, u, t).coeffs - want).max() < 1e-12


def test_eigenbasis_against_split_step():
    u0 = FourierState.plane_wave((0,))
    exact = propagate(make_plan(V1, 16), u0, 1.0)
    split = propagate(make_plan(V1, 16, scheme="split-step", dt=1e-3), u0, 1.0)
    assert np.linalg.norm(exact.coeffs - split.coeffs) <= 1e-6


def test_eigenbasis_against_matrix_exponential():
    plan = make_plan(Potential.cosines(2, {(1, 0): 2.0, (1, 1): 0.5}), 3)
    rng = np.random.default_rng(3)
    u = FourierState.random(2, 3, rng)
    U = scipy.linalg.expm(-1j * 0.9 * plan.hamiltonian)
    assert np.abs(propagate(plan, u, 0.9).coeffs - U @ u.on_modes(plan.int_modes)).max() < 1e-12


def test_unitarity_and_time_reversal():
    rng = np.random.default_rng(4)
    u = FourierState.random(1, 6, rng)
    for scheme, tol in (("eigenbasis", 1e-8), ("split-step", 1e-6)):
        plan = make_plan(V1, 10, scheme=scheme)
        v = propagate(plan, u, 1.3)
        assert abs(v.norm() - u.norm()) <= tol
        back = propagate(plan, v, -1.3)
        assert np.abs(back.on_modes(plan.int_modes) - u.on_modes(plan.int_modes)).max() <= tol


def test_split_step_is_second_order():
    rng = np.random.default_rng(5)
    u = FourierState.random(1, 3, rng)
    ref = propagate(make_plan(V1, 12), u, 1.0).coeffs
    errs = [np.linalg.norm(propagate(make_plan(V1, 12, scheme="split-step", dt=dt), u, 1.0).coeffs - ref)
            for dt in (0.02, 0.01)]
    assert 3.5 < errs[0] / errs[1] < 4.5


def test_time_dependent_potential():
    tm = TimeModulation("cos", omega=2.0)
    V = Potential(1, {(1,): 1.0, (-1,): 1.0}, tm)
    with pytest.raises(ValueError):
        make_plan(V, 6, scheme="eigenbasis")
    plan = make_plan(V, 10, dt=1e-3)
    u0 = FourierState.plane_wave((0,))
    coarse = propagate(plan, u0, 1.0)
    fine = propagate(make_plan(V, 10, dt=2.5e-4), u0, 1.0)
    assert abs(coarse.norm() - 1) < 1e-10
    assert np.linalg.norm(coarse.coeffs - fine.coeffs) < 1e-5
    # the modulation switches the potential off at t = π/4 only
    assert np.linalg.norm(coarse.coeffs - propagate(make_plan(V1, 10), u0, 1.0).coeffs) > 1e-3


def test_box_escape_is_refused():
    plan = make_plan(V1, 3)
    with pytest.raises(BoxEscapeError):
        propagate(plan, FourierState.plane_wave((5,)), 0.1)


def test_propagate_many_matches_single_calls():
    plan = make_plan(V1, 8, scheme="split-step", dt=1e-2)
    u = FourierState.plane_wave((1,))
    ts = np.array([0.0, 0.1, 0.35])
    many = propagate_many(plan, u.on_modes(plan.int_modes), ts)
    for t, row in zip(ts, many):
        assert np.abs(row - propagate(plan, u, t).coeffs).max() < 1e-12


def test_potential_validation_and_json():
    with pytest.raises(ValueError, match="not real"):
        Potential(1, {(1,): 1.0, (-1,): 2.0})
    V = Potential.cosines(2, {(1, 0): 2.0, (0, 1): 3.0})
    W = Potential.from_json(V.to_json())
    assert W.coeffs == V.coeffs
    x = np.array([[0.3, 1.1]])
    assert abs(V.evaluate(x)[0] - (2 * math.cos(0.3) + 3 * math.cos(1.1))) < 1e-14


def test_averaged_propagator_examples():
    V = Potential.cosines(2, {(1, 0): 2.0, (0, 1): 3.0})
    lam = saturate([(1, 0)])
    avg = averaged_propagator(lam, V, 5)
    assert set(avg.potential.coeffs) == {(1, 0), (-1, 0)}
    assert avg.size == 11
    # no modes in Λ: free evolution on T_Λ
    free = averaged_propagator(saturate([(0, 1)]), Potential.cosines(2, {(1, 0): 1.0}), 4)
    assert np.allclose(free.hamiltonian, np.diag(np.diag(free.hamiltonian)))
    # Λ = Z^2: same Hamiltonian as the full plan on the same box
    full = averaged_propagator(PrimitiveModule.full(2), V, 2)
    plan = make_plan(V, 2)
    order = [plan.index_of(k) for k in full.keys]
    assert np.allclose(full.hamiltonian, plan.hamiltonian[np.ix_(order, order)])
    trivial = averaged_propagator(PrimitiveModule.zero(2), V, 3)
    assert trivial.size == 1


def test_averaged_propagator_with_shifts():
    lam = saturate([(1, 1)])
    avg = averaged_propagator(lam, Potential.zero(2), 2, shifts=[(0, 0), ("1/2", "1/2")])
    assert avg.size == 10 and avg.int_modes is None
    assert np.allclose(sorted(avg.eigvals)[:2], [0.0, 0.25])


def test_spectral_cutoff_examples():
    h = 0.1
    free = make_plan(Potential.zero(1), 20)
    rng = np.random.default_rng(6)
    u = FourierState.random(1, 20, rng)
    from twomicro.dynamics import energy_window

    out = spectral_cutoff(u, free, h)
    k = free.int_modes[:, 0].astype(float)
    assert np.abs(out.coeffs - energy_window(h * h * k * k / 2) * u.on_modes(free.int_modes)).max() < 1e-12
    ident = spectral_cutoff(u, free, h, chi=lambda s: np.ones_like(s))
    assert np.abs(ident.coeffs - u.on_modes(free.int_modes)).max() < 1e-12
    plan = make_plan(V1, 20)
    assert spectral_cutoff(u, plan, h).norm() <= u.norm() + 1e-12


def test_time_averaged_density_examples():
    plan = make_plan(Potential.zero(1), 3)
    flat = time_averaged_density(plan, FourierState.plane_wave((2,)), 1.0, grid=16)
    assert np.abs(flat - 1 / (2 * np.pi)).max() < 1e-14
    pair = FourierState.from_dict({(0,): 1, (1,): 1}).normalized()
    dens = time_averaged_density(plan, pair, 4 * np.pi, grid=16)
    assert np.abs(dens - 1 / (2 * np.pi)).max() < 1e-6
    rng = np.random.default_rng(7)
    u = FourierState.random(2, 2, rng)
    plan2 = make_plan(Potential.cosines(2, {(1, 0): 1.0}), 4)
    d2 = time_averaged_density(plan2, u, 1.0, grid=16, panels_per_unit=200)
    mass = d2.mean() * (2 * np.pi) ** 2
    assert abs(mass - 1) < 1e-6
    assert d2.min() >= 0


def test_simpson_weights_integrate_cubics():
    t, w = simpson_weights(2.0, 7)
    assert len(t) == 9
    assert abs(w @ t**3 - 4.0) < 1e-13
