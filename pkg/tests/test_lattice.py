import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twomicro.lattice import (
    PrimitiveModule,
    RationalVector,
    classify,
    geometry,
    in_resonant_set,
    integer_kernel,
    mode_in,
    resonance_order,
    row_hnf,
    saturate,
    stabilizer,
)


def brute_stabilizer(xi, box=10):
    d = len(xi)
    hits = [k for k in itertools.product(range(-box, box + 1), repeat=d)
            if sum(Fraction(a) * b for a, b in zip(xi, k)) == 0]
    return saturate(hits, d)


def test_saturate_examples():
    assert saturate([(2, 0)]).basis == ((1, 0),)
    z = saturate([], 2)
    assert z.rank == 0 and z.basis == ()
    assert saturate([(2, 4)]).basis == ((1, 2),)
    # (1,2) is in the span of (2,4) but is not an integer multiple of it
    assert Fraction(1, 2) * 2 == 1 and (1, 2) != (2, 4)


def test_saturate_is_idempotent_and_canonical():
    lam = saturate([(2, 4, 6), (0, 3, 3)])
    assert saturate(lam.basis, 3) == lam
    assert lam.basis == tuple(tuple(r) for r in row_hnf(lam.basis, 3))


def test_from_json_rejects_non_primitive():
    with pytest.raises(ValueError, match="saturated"):
        PrimitiveModule.from_json({"dim": 2, "basis": [[2, 4]]})
    lam = saturate([(1, 1)])
    assert PrimitiveModule.from_json(lam.to_json()) == lam


def test_stabilizer_examples():
    assert stabilizer((1, 0)) == saturate([(0, 1)])
    assert stabilizer(("1/3", "1/2")).basis == ((3, -2),)
    assert stabilizer((0, 0)) == PrimitiveModule.full(2)


def test_stabilizer_matches_brute_force_for_third_half():
    assert brute_stabilizer([Fraction(1, 3), Fraction(1, 2)]) == stabilizer(("1/3", "1/2"))


def test_resonance_order_examples():
    assert resonance_order((1, 1)) == 1
    assert resonance_order((1, 0, 0)) == 1
    assert resonance_order((0, 0)) == 0


def test_classify_examples():
    lam = classify((1, 1))
    assert lam.basis == ((1, -1),)
    assert all(RationalVector((1, 1)).dot(b) == 0 for b in lam.basis)
    assert classify(("1/3", "1/2")).basis == ((3, -2),)
    one = classify((5,))
    assert one.rank == 0 and resonance_order((5,)) == 1


def test_floats_are_refused():
    with pytest.raises(TypeError, match="snap_frequency"):
        RationalVector([0.5, 1])


def test_geometry_examples():
    g = geometry(saturate([(1, 1)]))
    half = Fraction(1, 2)
    assert g.projector == ((half, half), (half, half))
    assert g.complement.basis == ((1, -1),)
    assert g.covering_degree == 2
    g = geometry(saturate([(1, 0)]))
    assert g.projector == ((1, 0), (0, 0))
    assert g.complement.basis == ((0, 1),)
    assert g.covering_degree == 1
    g = geometry(PrimitiveModule.full(2))
    assert g.projector == ((1, 0), (0, 1))
    assert g.complement.rank == 0 and g.covering_degree == 1


def test_covering_degree_counts_cosets():
    # residues of Z^2 modulo Λ ⊕ complement for Λ = Z(1,1)
    lam = saturate([(1, 1)])
    g = geometry(lam)
    sub = np.array([lam.basis[0], g.complement.basis[0]]).T
    reps = set()
    for k in itertools.product(range(-3, 4), repeat=2):
        c = np.linalg.solve(sub, k)
        reps.add(tuple(np.round((c - np.floor(c + 1e-12)) * 2).astype(int) % 2))
    assert len(reps) == g.covering_degree


def test_mode_in_examples():
    lam = saturate([(1, 1)])
    assert mode_in((2, 2), lam)
    assert not mode_in((1, 0), lam)
    for m in (lam, PrimitiveModule.zero(2), PrimitiveModule.full(2)):
        assert mode_in((0, 0), m)


def test_in_resonant_set_partition_small_cases():
    mods = [PrimitiveModule.zero(2), PrimitiveModule.full(2), saturate([(1, 0)]), saturate([(0, 1)]), saturate([(1, -1)])]
    for xi in [(0, 0), (1, 0), (0, 1), (1, 1), ("1/2", "1/3")]:
        hits = [m for m in mods if in_resonant_set(xi, m)]
        assert len(hits) <= 1
        assert in_resonant_set(xi, classify(xi))


# |p| <= 3, q <= 3: scaled to integers the entries are <= 18, so the
# pairwise kernel vectors fit in the brute-force box
small_rational = st.builds(Fraction, st.integers(-3, 3), st.integers(1, 3))


@settings(max_examples=60, deadline=None)
@given(st.lists(small_rational, min_size=2, max_size=2))
def test_stabilizer_property(entries):
    xi = RationalVector(entries)
    lam = stabilizer(xi)
    assert all(xi.dot(b) == 0 for b in lam.basis)
    if lam.rank:
        assert saturate(lam.basis, xi.dim) == lam
    assert lam == brute_stabilizer(entries, box=18)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.integers(-5, 5), min_size=3, max_size=3), min_size=1, max_size=3))
def test_integer_kernel_property(rows):
    ker = integer_kernel(rows, 3)
    A = np.array(rows)
    for v in ker:
        assert not np.any(A @ np.array(v))
    assert len(ker) == 3 - np.linalg.matrix_rank(A)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.integers(-4, 4), min_size=2, max_size=2), min_size=1, max_size=2))
def test_projector_is_orthogonal_projection(gens):
    lam = saturate(gens, 2)
    if lam.rank == 0:
        return
    P = np.array(geometry(lam).projector, dtype=object)
    assert (P.dot(P) == P).all()
    assert (P.T == P).all()
