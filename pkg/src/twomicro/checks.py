"""Exact finite-h identity checks, shared by the CLI ``verify`` command and the tests.

Every check is seeded and returns a :class:`CheckResult` carrying the worst
observed defect, the tolerance it is held to, and a digest of the raw
numbers so determinism can be asserted byte-for-byte.
"""

from __future__ import annotations

import hashlib
import itertools
import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from ._modes import box_modes
from .dynamics import Potential, make_plan
from .lattice import PrimitiveModule, RationalVector, classify, in_resonant_set, saturate
from .microlocal import DEFAULT_H_GRID, covering_split, lift_isometry_check, sigma_proxy
from .quantization import (
    Cutoff,
    FourierState,
    Symbol,
    commutator_defect,
    operator_matrix,
    twomicro_pair,
    wigner_pair,
)

__all__ = [
    "CheckResult",
    "symbol_corpus",
    "xonly_corpus",
    "check_marginal_identity",
    "check_commutator",
    "check_twomicro_sum",
    "check_partition",
    "check_covering_isometry",
    "check_free_egorov",
    "check_sigma_proxy",
    "EXACT_SUITE",
]

DEFAULT_R_GRID = (1.0, 2.0, 4.0, 8.0)


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool
    seconds: float
    digest: str
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: worst={self.value:.3e} tol={self.tolerance:.0e} [{self.seconds:.2f}s]{extra}"


def _digest(values) -> str:
    h = hashlib.sha256()
    for v in values:
        h.update(np.asarray(v, dtype=np.complex128).tobytes())
    return h.hexdigest()[:16]


def _result(name, worst, tol, t0, values, detail="", ok=None):
    passed = (worst <= tol) if ok is None else ok
    return CheckResult(name, float(worst), tol, bool(passed), time.perf_counter() - t0, _digest(values), detail)


def xonly_corpus(d: int, count: int, rng: np.random.Generator, radius: int = 3) -> list[Symbol]:
    """Real trigonometric polynomials a(x) with random coefficients."""
    out = []
    for _ in range(count):
        modes = box_modes(d, radius)
        pick = rng.choice(len(modes), size=4, replace=False)
        coeffs = {}
        for i in pick:
            m = tuple(int(x) for x in modes[i])
            c = complex(rng.standard_normal(), rng.standard_normal())
            coeffs[m] = coeffs.get(m, 0) + c
            neg = tuple(-x for x in m)
            coeffs[neg] = coeffs.get(neg, 0) + c.conjugate()
        out.append(Symbol.trig(d, coeffs))
    return out


def symbol_corpus(d: int, count: int, rng: np.random.Generator) -> list[Symbol]:
    """Mixed corpus: x-only, polynomial-in-ξ and Gaussian-in-ξ profiles."""
    out = []
    kinds = itertools.cycle(["xonly", "poly", "gauss", "bump"])
    for _ in range(count):
        kind = next(kinds)
        modes = [[int(v) for v in rng.integers(-2, 3, size=d)] for _ in range(3)]
        coef = [[float(rng.standard_normal()), float(rng.standard_normal())] for _ in modes]
        cfg: dict = {"xmode": modes, "coef": coef, "real": True}
        if kind == "poly":
            exps = [[int(v) for v in rng.integers(0, 3, size=d)] for _ in range(2)]
            cfg["xi_profile"] = {"kind": "poly", "terms": [{"exp": e, "coef": float(rng.standard_normal())} for e in exps]}
        elif kind == "gauss":
            cfg["xi_profile"] = {"kind": "gauss", "center": rng.uniform(-0.5, 0.5, d).tolist(), "width": 0.4}
        elif kind == "bump":
            cfg["xi_profile"] = {"kind": "indicator_smoothed", "center": [0.0] * d, "radius": 0.7}
        out.append(Symbol.from_config(cfg, d))
    return out


def check_marginal_identity(seed: int = 1, n_states: int = 100, n_symbols: int = 10,
                            N: int = 8, tol: float = 1e-10) -> CheckResult:
    """⟨u, Op_h(a)u⟩ against a rectangle-rule quadrature of ∫a|u|² (exact for trig polys)."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    d = 2
    syms = xonly_corpus(d, n_symbols, rng)
    M = 48  # > 2N + max symbol radius: the rule is exact
    g = 2 * np.pi * np.arange(M) / M
    X = np.array(np.meshgrid(g, g, indexing="ij")).reshape(2, -1).T
    a_vals = [np.real(s.evaluate(X, np.zeros_like(X))) for s in syms]
    worst, vals = 0.0, []
    for _ in range(n_states):
        u = FourierState.random(d, N, rng)
        dens = np.abs(u.evaluate(X)) ** 2
        for s, av in zip(syms, a_vals):
            quad = (2 * np.pi / M) ** d * float(np.sum(av * dens))
            pair = wigner_pair(u, s, 0.125)
            vals.append(pair)
            worst = max(worst, abs(pair - quad))
    return _result("marginal identity", worst, tol, t0, vals)


def check_commutator(seed: int = 2, n_symbols: int = 20, tol: float = 1e-10) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst, vals = 0.0, []
    for i, d in enumerate([1, 2] * (n_symbols // 2) + [1] * (n_symbols % 2)):
        a = symbol_corpus(d, 1, rng)[0] if i % 4 else xonly_corpus(d, 1, rng)[0]
        for h in (1 / 8, 1 / 64):
            N = 8 if d == 1 else 6
            v = commutator_defect(a, h, N)
            vals.append(v)
            worst = max(worst, v)
    return _result("commutator identity", worst, tol, t0, vals)


def _eta_symbol(d: int, lam: PrimitiveModule, rng: np.random.Generator) -> Symbol:
    direction = rng.standard_normal(d)
    modes = [list(b) for b in lam.basis] + [[0] * d]
    return Symbol.from_config(
        {
            "xmode": modes,
            "coef": [[float(rng.standard_normal()), 0.0] for _ in modes],
            "real": True,
            "xi_profile": {"kind": "gauss", "center": [0.0] * d, "width": 1.0},
            "eta_profile": {"kind": "homogeneous", "const": 0.5, "direction": direction.tolist()},
            "R0": 3.0,
        },
        d,
        module=lam,
    )


def check_twomicro_sum(seed: int = 3, n_states: int = 50, tol: float = 1e-12) -> CheckResult:
    """inner + outer = uncut pairing for every (h, R), state and module."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    d = 2
    modules = [saturate([(1, 0)]), saturate([(1, 1)]), saturate([(1, -2)])]
    syms = [_eta_symbol(d, lam, rng) for lam in modules]
    worst, vals = 0.0, []
    for _ in range(n_states):
        u = FourierState.random(d, 5, rng)
        for lam, a in zip(modules, syms):
            for h in DEFAULT_H_GRID:
                uncut = wigner_pair(u, a, h, eta_module=lam)
                for R in DEFAULT_R_GRID:
                    cut = Cutoff(R)
                    s = twomicro_pair(u, a, h, cut, "inner") + twomicro_pair(u, a, h, cut, "outer")
                    vals.append(s)
                    worst = max(worst, abs(s - uncut))
    return _result("two-microlocal sum", worst, tol, t0, vals)


def _random_rational(d: int, rng: np.random.Generator) -> RationalVector:
    # |p| <= 3, q <= 3: the pairwise vectors ξ_j e_i - ξ_i e_j (scaled to
    # integers) then have entries <= 18, so the brute-force box sees a
    # full-rank subset of the stabilizer
    entries = []
    for _ in range(d):
        if rng.random() < 0.25:
            entries.append(Fraction(0))
        else:
            entries.append(Fraction(int(rng.integers(-3, 4)), int(rng.integers(1, 4))))
    return RationalVector(entries)


def _brute_stabilizer(xi: RationalVector, box: int = 20) -> PrimitiveModule:
    d = xi.dim
    ks = box_modes(d, box)
    den = xi.common_denominator()
    w = np.array([int(e * den) for e in xi.entries], dtype=np.int64)
    hits = ks[(ks @ w) == 0]
    return saturate([tuple(int(v) for v in k) for k in hits], d)


def _candidate_modules(d: int) -> list[PrimitiveModule]:
    """{0}, Z^d, and every saturated span of one or two vectors with |k|_inf <= 1."""
    small = [tuple(int(x) for x in k) for k in box_modes(d, 1) if any(k)]
    seen = {PrimitiveModule.zero(d), PrimitiveModule.full(d)}
    for k in small:
        seen.add(saturate([k], d))
    for k1, k2 in itertools.combinations(small, 2):
        seen.add(saturate([k1, k2], d))
    return sorted(seen, key=lambda m: (m.rank, m.basis))


def check_partition(seed: int = 4, n: int = 1000, tol: float = 0.0) -> CheckResult:
    """classify agrees with brute force and ξ lies in exactly one candidate R_Λ."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    cands = {d: _candidate_modules(d) for d in (2, 3)}
    brute_cache: dict = {}
    bad, vals = 0, []
    for i in range(n):
        d = 2 if i % 2 == 0 else 3
        xi = _random_rational(d, rng)
        lam = classify(xi)
        key = tuple(xi.entries)
        if key not in brute_cache:
            brute_cache[key] = _brute_stabilizer(xi, 20)
        ok = brute_cache[key] == lam and in_resonant_set(xi, lam)
        pool = cands[d] if lam in cands[d] else cands[d] + [lam]
        members = sum(in_resonant_set(xi, m) for m in pool)
        ok = ok and members == 1
        bad += not ok
        vals.append(lam.rank)
    return _result("frequency partition", float(bad), tol, t0, vals, detail=f"{bad} mismatches of {n}")


def check_covering_isometry(seed: int = 5, n_states: int = 100, tol: float = 1e-12) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    modules = [saturate([(1, 0)]), saturate([(1, 1)]), saturate([(2, 1)]), saturate([(1, 1, 0)], 3)]
    splits = {lam: covering_split(lam, 4 if lam.dim == 2 else 2) for lam in modules}
    worst, vals = 0.0, []
    for i in range(n_states):
        lam = modules[i % len(modules)]
        u = FourierState.random(lam.dim, 4 if lam.dim == 2 else 2, rng)
        v = lift_isometry_check(u, splits[lam])
        vals.append(v)
        worst = max(worst, v)
    return _result("covering isometry", worst, tol, t0, vals)


def check_free_egorov(seed: int = 6, tol: float = 1e-10) -> CheckResult:
    """U(t)^* Op_h(a) U(t) = Op_h(a∘φ_{t/h}) for V = 0."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst, vals = 0.0, []
    for d, N in ((1, 8), (2, 6)):
        plan = make_plan(Potential.zero(d), N, scheme="exact-free")
        box = plan.int_modes
        kin = plan.kinetic()
        for a in symbol_corpus(d, 4, rng):
            for h in (1 / 8, 1 / 32):
                A = operator_matrix(a, h, box)
                for t in (0.1, 1.0, np.pi):
                    ph = np.exp(-1j * t * kin)
                    conj = np.conj(ph)[:, None] * A * ph[None, :]
                    B = operator_matrix(a.flowed(t / h), h, box)
                    v = float(np.abs(conj - B).max())
                    vals.append(v)
                    worst = max(worst, v)
    return _result("free Egorov", worst, tol, t0, vals)


def check_sigma_proxy(seed: int = 7, n_states: int = 60, tol: float = 1e-10) -> CheckResult:
    """Positivity (λ_min >= -tol) and trace budget (trace <= ‖u‖²) of the proxy."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    modules = [saturate([(1, 0)]), saturate([(1, 1)]), saturate([(1, -2)]), saturate([(1, 0), (0, 1)])]
    worst_neg, worst_budget, vals = 0.0, 0.0, []
    for i in range(n_states):
        u = FourierState.random(2, int(rng.integers(1, 6)), rng, normalize=bool(i % 2))
        for lam in modules:
            for R in DEFAULT_R_GRID:
                p = sigma_proxy(u, lam, 0.125, Cutoff(R))
                lmin = p.min_eigenvalue()
                vals.append(lmin)
                vals.append(p.trace)
                worst_neg = max(worst_neg, -lmin)
                worst_budget = max(worst_budget, p.trace - u.norm() ** 2)
    worst = max(worst_neg, worst_budget)
    return _result("sigma proxy positivity", worst, tol, t0, vals,
                   detail=f"max negativity {worst_neg:.1e}, max budget excess {worst_budget:.1e}")


EXACT_SUITE = (
    check_marginal_identity,
    check_commutator,
    check_twomicro_sum,
    check_partition,
    check_covering_isometry,
)
