"""Exact algebra of primitive submodules of Z^d and resonance classification.

Everything here works with Python integers and :class:`fractions.Fraction`,
so equality of modules and membership tests are exact.  Floats are refused;
use :func:`twomicro.harness.snap_frequency` to turn measured frequencies into
rationals first.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from math import gcd
from typing import Iterable, Sequence

__all__ = [
    "RationalVector",
    "PrimitiveModule",
    "ModuleGeometry",
    "saturate",
    "stabilizer",
    "resonance_order",
    "classify",
    "geometry",
    "mode_in",
    "integer_kernel",
    "row_hnf",
    "NON_RESONANT",
]


def _as_int(v) -> int:
    if isinstance(v, bool):
        raise TypeError("booleans are not integers here")
    if isinstance(v, int):
        return v
    # numpy integer scalars
    if hasattr(v, "__index__"):
        return int(v.__index__())
    if isinstance(v, Fraction) and v.denominator == 1:
        return int(v.numerator)
    raise TypeError(f"expected an integer, got {v!r}")


def _as_fraction(v) -> Fraction:
    if isinstance(v, float):
        raise TypeError(
            f"floating value {v!r} refused; snap it to a rational first "
            "(twomicro.harness.snap_frequency)"
        )
    if isinstance(v, Fraction):
        return v
    if isinstance(v, str):
        return Fraction(v.strip())
    return Fraction(_as_int(v))


@dataclass(frozen=True)
class RationalVector:
    """An exact rational vector in Q^d."""

    entries: tuple[Fraction, ...]

    def __init__(self, entries: Iterable):
        vals = tuple(_as_fraction(e) for e in entries)
        if not vals:
            raise ValueError("RationalVector needs dimension >= 1")
        object.__setattr__(self, "entries", vals)

    @property
    def dim(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def dot(self, k: Sequence[int]) -> Fraction:
        if len(k) != self.dim:
            raise ValueError(f"dimension mismatch: {len(k)} vs {self.dim}")
        return sum((e * _as_int(ki) for e, ki in zip(self.entries, k)), Fraction(0))

    def common_denominator(self) -> int:
        den = 1
        for e in self.entries:
            den = den * e.denominator // gcd(den, e.denominator)
        return den

    def to_json(self) -> list[str]:
        return [f"{e.numerator}/{e.denominator}" for e in self.entries]

    @classmethod
    def from_json(cls, data: Sequence[str | int]) -> "RationalVector":
        return cls(data)

    def __repr__(self):
        return "RationalVector(" + ", ".join(str(e) for e in self.entries) + ")"


def row_hnf(rows: Sequence[Sequence[int]], ncols: int | None = None) -> list[list[int]]:
    """Row Hermite normal form of an integer matrix, zero rows dropped.

    Pivots are strictly increasing in column index and positive; entries above
    each pivot lie in ``[0, pivot)``.  The result depends only on the row
    lattice, so it is a canonical basis.
    """
    A = [[_as_int(x) for x in r] for r in rows]
    if ncols is None:
        ncols = len(A[0]) if A else 0
    for r in A:
        if len(r) != ncols:
            raise ValueError("ragged integer matrix")
    m = len(A)
    piv_row = 0
    pivots: list[int] = []
    for col in range(ncols):
        if piv_row >= m:
            break
        # Euclid on column `col` among rows piv_row..m-1
        while True:
            nz = [i for i in range(piv_row, m) if A[i][col] != 0]
            if not nz:
                break
            i_min = min(nz, key=lambda i: abs(A[i][col]))
            A[piv_row], A[i_min] = A[i_min], A[piv_row]
            p = A[piv_row][col]
            done = True
            for i in range(piv_row + 1, m):
                if A[i][col] != 0:
                    q = A[i][col] // p
                    A[i] = [a - q * b for a, b in zip(A[i], A[piv_row])]
                    if A[i][col] != 0:
                        done = False
            if done:
                break
        if all(A[i][col] == 0 for i in range(piv_row, m)):
            continue
        if A[piv_row][col] < 0:
            A[piv_row] = [-a for a in A[piv_row]]
        p = A[piv_row][col]
        for i in range(piv_row):
            q = A[i][col] // p
            if q:
                A[i] = [a - q * b for a, b in zip(A[i], A[piv_row])]
        pivots.append(col)
        piv_row += 1
    return [list(r) for r in A[:piv_row]]


def integer_kernel(rows: Sequence[Sequence[int]], d: int) -> list[list[int]]:
    """Basis (as a list of d-vectors) of ``{k in Z^d : A k = 0}``.

    Uses unimodular column operations tracked on an identity matrix; the
    kernel of an integer matrix is always saturated.
    """
    A = [[_as_int(x) for x in r] for r in rows]
    for r in A:
        if len(r) != d:
            raise ValueError(f"row has length {len(r)}, expected {d}")
    # work with columns: C[j] is column j of A stacked over column j of I
    m = len(A)
    cols = [[A[i][j] for i in range(m)] + [int(i == j) for i in range(d)] for j in range(d)]
    start = 0
    for i in range(m):
        while True:
            nz = [j for j in range(start, d) if cols[j][i] != 0]
            if len(nz) <= 1:
                break
            j_min = min(nz, key=lambda j: abs(cols[j][i]))
            p = cols[j_min][i]
            for j in nz:
                if j != j_min:
                    q = cols[j][i] // p
                    cols[j] = [a - q * b for a, b in zip(cols[j], cols[j_min])]
        nz = [j for j in range(start, d) if cols[j][i] != 0]
        if nz:
            j = nz[0]
            cols[start], cols[j] = cols[j], cols[start]
            start += 1
    return [c[m:] for c in cols[start:]]


def _rank(rows: Sequence[Sequence[int]]) -> int:
    return len(row_hnf(rows)) if rows else 0


@dataclass(frozen=True)
class PrimitiveModule:
    """A saturated sublattice of Z^d stored by its canonical basis.

    ``basis`` holds the basis vectors (the columns of the d x r basis matrix)
    in row-Hermite order.  Two modules are equal iff their canonical bases are.
    """

    dim: int
    basis: tuple[tuple[int, ...], ...]

    @property
    def rank(self) -> int:
        return len(self.basis)

    def basis_matrix(self) -> list[list[int]]:
        """The d x r integer matrix whose columns are the basis vectors."""
        return [[b[i] for b in self.basis] for i in range(self.dim)]

    def to_json(self) -> dict:
        return {"dim": self.dim, "basis": [list(b) for b in self.basis]}

    @classmethod
    def from_json(cls, data: dict) -> "PrimitiveModule":
        mod = saturate(data["basis"], dim=int(data["dim"]))
        given = tuple(tuple(_as_int(x) for x in b) for b in data["basis"])
        if mod.basis != given:
            raise ValueError(
                f"basis {given} is not the canonical primitive basis; "
                f"saturated form is {mod.basis}"
            )
        return mod

    @classmethod
    def zero(cls, d: int) -> "PrimitiveModule":
        return cls(d, ())

    @classmethod
    def full(cls, d: int) -> "PrimitiveModule":
        return cls(d, tuple(tuple(int(i == j) for i in range(d)) for j in range(d)))

    def contains_module(self, other: "PrimitiveModule") -> bool:
        return all(mode_in(b, self) for b in other.basis)

    def __repr__(self):
        if not self.basis:
            return f"PrimitiveModule(d={self.dim}, {{0}})"
        gens = ", ".join("(" + ",".join(map(str, b)) + ")" for b in self.basis)
        return f"PrimitiveModule(d={self.dim}, Z<{gens}>)"


# Token for frequencies that only an irrational value could produce.
NON_RESONANT = "non-resonant"


def _check_dim(vectors, dim):
    vecs = [tuple(_as_int(x) for x in v) for v in vectors]
    if dim is None:
        if not vecs:
            raise ValueError("cannot infer the dimension from an empty generator list")
        dim = len(vecs[0])
    for v in vecs:
        if len(v) != dim:
            raise ValueError(f"dimension mismatch: vector {v} has length {len(v)}, expected {dim}")
    return vecs, dim


def saturate(generators: Iterable[Sequence[int]], dim: int | None = None) -> PrimitiveModule:
    """Primitive module ``<G> ∩ Z^d`` spanned (over Q) by the generators."""
    vecs, dim = _check_dim(list(generators), dim)
    if dim < 1:
        raise ValueError("dimension must be >= 1")
    nonzero = [v for v in vecs if any(v)]
    if not nonzero:
        return PrimitiveModule.zero(dim)
    # annihilator of the span, then its annihilator: saturated by construction
    perp = integer_kernel(nonzero, dim)
    sat = integer_kernel(perp, dim) if perp else [[int(i == j) for i in range(dim)] for j in range(dim)]
    hnf = row_hnf(sat, dim)
    return PrimitiveModule(dim, tuple(tuple(r) for r in hnf))


def stabilizer(xi: RationalVector | Sequence) -> PrimitiveModule:
    """``Λ_ξ = {k ∈ Z^d : k·ξ = 0}``."""
    xi = xi if isinstance(xi, RationalVector) else RationalVector(xi)
    den = xi.common_denominator()
    row = [int(e * den) for e in xi.entries]
    if not any(row):
        return PrimitiveModule.full(xi.dim)
    ker = integer_kernel([row], xi.dim)
    if not ker:
        return PrimitiveModule.zero(xi.dim)
    return PrimitiveModule(xi.dim, tuple(tuple(r) for r in row_hnf(ker, xi.dim)))


def resonance_order(xi: RationalVector | Sequence) -> int:
    """Order j with ξ ∈ Ω_j, i.e. d minus the rank of the stabilizer."""
    xi = xi if isinstance(xi, RationalVector) else RationalVector(xi)
    return xi.dim - stabilizer(xi).rank


def classify(xi: RationalVector | Sequence) -> PrimitiveModule:
    """The unique module Λ with ξ ∈ R_Λ (which is the stabilizer of ξ)."""
    return stabilizer(xi)


def in_resonant_set(xi: RationalVector | Sequence, lam: PrimitiveModule) -> bool:
    """Membership ξ ∈ R_Λ = Λ^⊥ ∩ Ω_{d - rk Λ}, checked from the definition."""
    xi = xi if isinstance(xi, RationalVector) else RationalVector(xi)
    if lam.dim != xi.dim:
        raise ValueError("dimension mismatch")
    if any(xi.dot(b) != 0 for b in lam.basis):
        return False
    return resonance_order(xi) == xi.dim - lam.rank


def mode_in(k: Sequence[int], lam: PrimitiveModule) -> bool:
    """Exact integer membership ``k ∈ Λ``."""
    k = [_as_int(x) for x in k]
    if len(k) != lam.dim:
        raise ValueError(f"dimension mismatch: {len(k)} vs {lam.dim}")
    if not any(k):
        return True
    if lam.rank == 0:
        return False
    # Echelon basis: peel pivots off one at a time.
    rest = list(k)
    for b in lam.basis:
        piv = next(i for i, x in enumerate(b) if x != 0)
        if any(rest[:piv]):
            return False
        q, r = divmod(rest[piv], b[piv])
        if r:
            return False
        rest = [x - q * y for x, y in zip(rest, b)]
    return not any(rest)


@dataclass(frozen=True)
class ModuleGeometry:
    """Projector, complement lattice and covering degree of a module."""

    module: PrimitiveModule
    projector: tuple[tuple[Fraction, ...], ...]
    complement: PrimitiveModule
    covering_degree: int

    @property
    def dim(self) -> int:
        return self.module.dim

    def project(self, k: Sequence) -> tuple[Fraction, ...]:
        """P_Λ k in exact rationals."""
        kk = [_as_fraction(x) for x in k]
        return tuple(sum((p * x for p, x in zip(row, kk)), Fraction(0)) for row in self.projector)

    def project_perp(self, k: Sequence) -> tuple[Fraction, ...]:
        kk = [_as_fraction(x) for x in k]
        return tuple(x - y for x, y in zip(kk, self.project(kk)))

    @cached_property
    def projector_float(self):
        import numpy as np

        return np.array([[float(p) for p in row] for row in self.projector])


def _solve_rational(M: list[list[Fraction]], B: list[list[Fraction]]) -> list[list[Fraction]]:
    """Solve M X = B exactly by Gauss-Jordan (M square, invertible)."""
    n = len(M)
    aug = [list(M[i]) + list(B[i]) for i in range(n)]
    for c in range(n):
        p = next(r for r in range(c, n) if aug[r][c] != 0)
        aug[c], aug[p] = aug[p], aug[c]
        pv = aug[c][c]
        aug[c] = [x / pv for x in aug[c]]
        for r in range(n):
            if r != c and aug[r][c] != 0:
                f = aug[r][c]
                aug[r] = [x - f * y for x, y in zip(aug[r], aug[c])]
    return [row[n:] for row in aug]


def _det(M: list[list[Fraction]]) -> Fraction:
    n = len(M)
    A = [list(r) for r in M]
    det = Fraction(1)
    for c in range(n):
        p = next((r for r in range(c, n) if A[r][c] != 0), None)
        if p is None:
            return Fraction(0)
        if p != c:
            A[c], A[p] = A[p], A[c]
            det = -det
        det *= A[c][c]
        for r in range(c + 1, n):
            f = A[r][c] / A[c][c]
            if f:
                A[r] = [x - f * y for x, y in zip(A[r], A[c])]
    return det


def _projector(mod: PrimitiveModule) -> tuple[tuple[Fraction, ...], ...]:
    d, r = mod.dim, mod.rank
    if r == 0:
        return tuple(tuple(Fraction(0) for _ in range(d)) for _ in range(d))
    B = [[Fraction(b[i]) for b in mod.basis] for i in range(d)]  # d x r
    G = [[sum(B[i][a] * B[i][c] for i in range(d)) for c in range(r)] for a in range(r)]
    Bt = [[B[i][a] for i in range(d)] for a in range(r)]  # r x d
    X = _solve_rational(G, Bt)  # (B^T B)^{-1} B^T, r x d
    return tuple(
        tuple(sum((B[i][a] * X[a][j] for a in range(r)), Fraction(0)) for j in range(d))
        for i in range(d)
    )


def geometry(lam: PrimitiveModule) -> ModuleGeometry:
    """Exact projector P_Λ, complement lattice Z^d ∩ Λ^⊥ and covering degree p_Λ."""
    d = lam.dim
    if lam.rank == 0:
        comp = PrimitiveModule.full(d)
    else:
        ker = integer_kernel([list(b) for b in lam.basis], d)
        comp = PrimitiveModule(d, tuple(tuple(r) for r in row_hnf(ker, d))) if ker else PrimitiveModule.zero(d)
    cols = list(lam.basis) + list(comp.basis)
    M = [[Fraction(c[i]) for c in cols] for i in range(d)]
    degree = abs(_det(M))
    assert degree.denominator == 1 and degree > 0
    return ModuleGeometry(lam, _projector(lam), comp, int(degree))
