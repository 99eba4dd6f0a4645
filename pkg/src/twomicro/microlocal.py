"""Finite-h stand-ins for the two-microlocal limit objects.

The operator σ_Λ is approximated by a positive Gram matrix over the Λ-side
frequencies m = P_Λk of the data; its evolution under the averaged propagator
is compared against the two-microlocal pairing of the fully evolved state.
Limits are never taken, only tabulated: a :class:`LimitTable` holds values on
an (h, R, t) grid and :func:`limit_extrapolate` summarises it in the order
h → 0 first, then R → ∞.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np

from ._modes import as_mode_array, box_modes
from .dynamics import (
    Potential,
    PropagatorPlan,
    averaged_propagator,
    make_plan,
    propagate_many,
    simpson_weights,
    _grid_values,
)
from .lattice import ModuleGeometry, PrimitiveModule, RationalVector, geometry, mode_in
from .quantization import Cutoff, FourierState, Symbol, _side_weight, operator_matrix

__all__ = [
    "CoveringSplit",
    "covering_split",
    "lift",
    "lift_isometry_check",
    "SigmaProxy",
    "sigma_proxy",
    "coset_shifts",
    "nu_lambda",
    "multiplication_matrix",
    "LimitTable",
    "limit_extrapolate",
    "ConcentratingFamily",
    "plane_wave_ladder",
    "transverse_profile_family",
    "gaussian_packet_family",
    "propagation_law_test",
    "grid_boxes",
    "marginal_xi",
    "histogram_variation",
    "TimeSamples",
    "sample_trajectory",
    "conditional_density",
    "flow_invariance_defect",
    "DEFAULT_H_GRID",
]

DEFAULT_H_GRID = (1 / 8, 1 / 16, 1 / 32, 1 / 64)

Key = tuple  # exact rational vector


def _exact(v) -> Key:
    return tuple(Fraction(x) for x in v)


def _key_str(k: Key) -> list[str]:
    return [f"{x.numerator}/{x.denominator}" for x in k]


# ---------------------------------------------------------------------------
# covering split


@dataclass(frozen=True)
class CoveringSplit:
    """The relabelling k ↦ (σ, m) = (P_{Λ^⊥}k, P_Λk) on a finite mode set."""

    geometry: ModuleGeometry
    modes: np.ndarray
    sigma: tuple[Key, ...]
    m: tuple[Key, ...]

    def pair_of(self, k) -> tuple[Key, Key]:
        k = tuple(int(x) for x in k)
        g = self.geometry
        return g.project_perp(k), g.project(k)


def covering_split(lam: PrimitiveModule | ModuleGeometry, box) -> CoveringSplit:
    """Exact split of every mode in ``box`` (a radius or an (n, d) mode list)."""
    geom = lam if isinstance(lam, ModuleGeometry) else geometry(lam)
    if geom.module.rank < 1:
        raise ValueError("covering split needs a module of rank >= 1")
    d = geom.dim
    modes = box_modes(d, int(box)) if np.ndim(box) == 0 else as_mode_array(box, d)
    sig, ms = [], []
    seen = set()
    for k in modes:
        s = geom.project_perp(k)
        m = geom.project(k)
        if tuple(a + b for a, b in zip(s, m)) != tuple(Fraction(int(x)) for x in k):
            raise AssertionError("covering split does not recover k")
        if (s, m) in seen:
            raise AssertionError("covering split is not injective")
        seen.add((s, m))
        sig.append(s)
        ms.append(m)
    return CoveringSplit(geom, modes, tuple(sig), tuple(ms))


def lift(u: FourierState, split: CoveringSplit) -> dict[tuple[Key, Key], complex]:
    """Fourier coefficients of T_Λu on T_{Λ^⊥} × T_Λ, keyed by (σ, m).

    With unit-normalised exponentials on the covering torus the factor
    p_Λ^{-1/2} cancels the volume ratio, so the coefficients are the û(k).
    """
    out: dict[tuple[Key, Key], complex] = {}
    for k, c in zip(u.modes, u.coeffs):
        out[split.pair_of(k)] = complex(c)
    return out


def lift_isometry_check(u: FourierState, split: CoveringSplit) -> float:
    """|Σ |T_Λu coefficients|² - ‖u‖²|."""
    lifted = lift(u, split)
    if len(lifted) != len(u):
        raise AssertionError("lift merged distinct modes")
    total = math.fsum(abs(c) ** 2 for c in lifted.values())
    return abs(total - math.fsum(abs(c) ** 2 for c in u.coeffs))


def constant_in_s(u: FourierState, split: CoveringSplit, tol: float = 0.0) -> bool:
    """True when every mode of u carrying mass has σ = 0."""
    return all(not any(s) for (s, _m), c in lift(u, split).items() if abs(c) > tol)


# ---------------------------------------------------------------------------
# sigma proxy


@dataclass(frozen=True, eq=False)
class SigmaProxy:
    """Positive Gram matrix over Λ-side modes m standing in for σ_Λ."""

    module: PrimitiveModule
    h: float
    R: float
    index: tuple[Key, ...]
    matrix: np.ndarray

    @property
    def trace(self) -> float:
        return float(np.real(np.trace(self.matrix)))

    @property
    def freqs(self) -> np.ndarray:
        return np.array([[float(x) for x in m] for m in self.index]).reshape(len(self.index), self.module.dim)

    def min_eigenvalue(self) -> float:
        if self.matrix.size == 0:
            return 0.0
        return float(np.linalg.eigvalsh(self.matrix).min())

    def hermiticity_defect(self) -> float:
        if self.matrix.size == 0:
            return 0.0
        return float(np.abs(self.matrix - self.matrix.conj().T).max())

    def to_json(self) -> dict:
        return {
            "module": self.module.to_json(),
            "h": self.h,
            "R": self.R,
            "modes": [_key_str(m) for m in self.index],
            "matrix_re": self.matrix.real.tolist(),
            "matrix_im": self.matrix.imag.tolist(),
            "trace": self.trace,
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "SigmaProxy":
        mod = PrimitiveModule.from_json(data["module"])
        index = tuple(tuple(Fraction(x) for x in m) for m in data["modes"])
        mat = np.asarray(data["matrix_re"], float) + 1j * np.asarray(data["matrix_im"], float)
        return cls(mod, float(data["h"]), float(data["R"]), index, mat.reshape(len(index), len(index)))


def sigma_proxy(u: FourierState, lam: PrimitiveModule, h: float, cutoff: Cutoff) -> SigmaProxy:
    """Σ_σ v_σ v_σ^* with v_σ(m) = û(σ + m)·√χ(m/R).

    Split weights keep the matrix positive at every h; they agree with the
    midpoint filter χ((m+m')/2R) wherever χ is locally 1.
    """
    geom = geometry(lam)
    if lam.rank < 1:
        raise ValueError("sigma proxy needs a module of rank >= 1")
    fibres: dict[Key, list[tuple[Key, complex]]] = {}
    for k, c in zip(u.modes, u.coeffs):
        s = geom.project_perp(k)
        m = geom.project(k)
        fibres.setdefault(s, []).append((m, complex(c)))
    index = tuple(sorted({m for items in fibres.values() for m, _ in items}))
    pos = {m: i for i, m in enumerate(index)}
    n = len(index)
    freqs = np.array([[float(x) for x in m] for m in index]).reshape(n, lam.dim)
    w = cutoff.sqrt_chi(freqs) if n else np.zeros(0)
    V = np.zeros((n, len(fibres)), dtype=np.complex128)
    for col, s in enumerate(sorted(fibres)):
        for m, c in fibres[s]:
            V[pos[m], col] = c
    V *= w[:, None]
    return SigmaProxy(lam, float(h), float(cutoff.R), index, V @ V.conj().T)


def coset_shifts(lam: PrimitiveModule, keys: Sequence[Key]) -> list[Key]:
    """Representatives of the classes m + Λ met by ``keys`` (all in ⟨Λ⟩)."""
    d, r = lam.dim, lam.rank
    B = [[Fraction(b[i]) for b in lam.basis] for i in range(d)]
    G = [[sum(B[i][a] * B[i][c] for i in range(d)) for c in range(r)] for a in range(r)]
    from .lattice import _solve_rational

    Ginv = _solve_rational(G, [[Fraction(int(i == j)) for j in range(r)] for i in range(r)])
    out: list[Key] = []
    seen = set()
    for m in keys:
        bt_m = [sum((B[i][a] * m[i] for i in range(d)), Fraction(0)) for a in range(r)]
        coords = [sum((Ginv[a][c] * bt_m[c] for c in range(r)), Fraction(0)) for a in range(r)]
        frac = [c - math.floor(c) for c in coords]
        s = tuple(sum((frac[a] * B[i][a] for a in range(r)), Fraction(0)) for i in range(d))
        if s not in seen:
            seen.add(s)
            out.append(s)
    return sorted(out)


def multiplication_matrix(b: Symbol, keys: Sequence[Key]) -> np.ndarray:
    """(M_b)[m, m'] = b_{m - m'} for a function b(x) (ξ-profiles read at ξ = 0)."""
    n = len(keys)
    pos = {tuple(m): i for i, m in enumerate(keys)}
    M = np.zeros((n, n), dtype=np.complex128)
    zero = np.zeros((1, b.dim))
    for mode, prof in b.terms.items():
        val = complex(np.asarray(prof(zero, zero)).reshape(-1)[0])
        for j, m in enumerate(keys):
            i = pos.get(tuple(m[a] + mode[a] for a in range(b.dim)))
            if i is not None:
                M[i, j] += val
    return M


def _embed(proxy: SigmaProxy, plan: PropagatorPlan) -> np.ndarray:
    idx = [plan.index_of(m) for m in proxy.index]
    if any(i < 0 for i in idx):
        missing = [m for m, i in zip(proxy.index, idx) if i < 0][0]
        raise ValueError(f"proxy mode {_key_str(missing)} is not in the plan box")
    n = plan.size
    S = np.zeros((n, n), dtype=np.complex128)
    ii = np.asarray(idx)
    S[np.ix_(ii, ii)] = proxy.matrix
    return S


def nu_lambda(b: Symbol, proxy: SigmaProxy, plan: PropagatorPlan, t: float | Sequence[float]):
    """Tr(M_b · U(t) σ U(t)^*) with U the averaged propagator on T_Λ."""
    if plan.module is not None and plan.module != proxy.module:
        raise ValueError("proxy and plan were built for different modules")
    for m in b.terms:
        if not mode_in(m, proxy.module):
            raise ValueError(f"b has the mode {m} outside Λ")
    S = _embed(proxy, plan)
    M = multiplication_matrix(b, plan.keys)
    W, lam = plan.eigvecs, plan.eigvals
    S_eig = W.conj().T @ S @ W
    M_eig = W.conj().T @ M @ W
    scalar = np.ndim(t) == 0
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.empty(len(ts))
    for i, tt in enumerate(ts):
        ph = np.exp(-1j * tt * lam)
        rho = ph[:, None] * S_eig * np.conj(ph)[None, :]
        val = np.sum(M_eig * rho.T)
        scale = max(1.0, float(np.abs(M).sum(axis=0).max()) * proxy.trace)
        if abs(val.imag) > 1e-10 * scale:
            raise ArithmeticError(f"nu_lambda is not real: imaginary part {val.imag:.3e}")
        out[i] = val.real
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# limit tables


@dataclass
class LimitTable:
    """Values on an (h, R, t) grid; h strictly decreasing, R strictly increasing."""

    h: np.ndarray
    R: np.ndarray
    t: np.ndarray
    values: np.ndarray
    label: str = "value"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.h = np.asarray(self.h, float)
        self.R = np.asarray(self.R, float)
        self.t = np.asarray(self.t, float)
        self.values = np.asarray(self.values, float).reshape(len(self.h), len(self.R), len(self.t))
        if len(self.h) > 1 and not np.all(np.diff(self.h) < 0):
            raise ValueError("h grid must be strictly decreasing")
        if len(self.R) > 1 and not np.all(np.diff(self.R) > 0):
            raise ValueError("R grid must be strictly increasing")

    def reduced(self, how: str = "max_abs") -> np.ndarray:
        """Collapse the t axis: ``max_abs`` or ``mean`` (trapezoid time average)."""
        if how == "max_abs":
            return np.abs(self.values).max(axis=2)
        if how == "mean":
            if len(self.t) == 1:
                return self.values[:, :, 0]
            span = self.t[-1] - self.t[0]
            return np.trapezoid(self.values, self.t, axis=2) / span
        raise ValueError(f"unknown reduction {how!r}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["h", "R", "t", self.label if self.label != "value" else "value"])
        for i, h in enumerate(self.h):
            for j, R in enumerate(self.R):
                for k, t in enumerate(self.t):
                    w.writerow([repr(float(h)), repr(float(R)), repr(float(t)), repr(float(self.values[i, j, k]))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, label: str = "value") -> "LimitTable":
        rows = list(csv.reader(io.StringIO(text)))[1:]
        hs = sorted({float(r[0]) for r in rows}, reverse=True)
        Rs = sorted({float(r[1]) for r in rows})
        ts = sorted({float(r[2]) for r in rows})
        vals = np.zeros((len(hs), len(Rs), len(ts)))
        for r in rows:
            vals[hs.index(float(r[0])), Rs.index(float(r[1])), ts.index(float(r[2]))] = float(r[3])
        return cls(np.array(hs), np.array(Rs), np.array(ts), vals, label)


def _neville_at_zero(x: np.ndarray, y: np.ndarray) -> float:
    """Value at x = 0 of the interpolating polynomial through (x_i, y_i)."""
    p = list(map(float, y))
    n = len(x)
    for level in range(1, n):
        for i in range(n - level):
            j = i + level
            p[i] = (x[j] * p[i] - x[i] * p[i + 1]) / (x[j] - x[i])
    return p[0]


def _verdict(seq: np.ndarray, rtol: float = 1e-12) -> str:
    scale = max(float(np.abs(seq).max()), 1e-300)
    diffs = np.diff(seq)
    if np.all(np.abs(diffs) <= rtol * scale):
        return "constant"
    if np.all(diffs < 0):
        return "decreasing"
    if np.all(diffs > 0):
        return "increasing"
    return "mixed"


def limit_extrapolate(table: LimitTable, reduce: str = "max_abs") -> dict:
    """Extrapolate h → 0 at every fixed R, then look at the trend in R.

    The h-extrapolation is Richardson/Neville through the last three h values
    (exact for c + a·h + b·h²).  ``slopes`` are least-squares slopes of the
    reduced value against h; ``verdict`` describes the sequence along the h
    grid (as h decreases) at every R.
    """
    if len(table.h) < 3 or len(table.R) < 1:
        raise ValueError("extrapolation needs at least 3 h values and 1 R value")
    if len(table.R) < 2:
        raise ValueError("extrapolation needs at least 2 R values")
    red = table.reduced(reduce)
    per_R = []
    for j, R in enumerate(table.R):
        col = red[:, j]
        est = _neville_at_zero(table.h[-3:], col[-3:])
        slope = float(np.polyfit(table.h, col, 1)[0])
        per_R.append({"R": float(R), "values": [float(v) for v in col], "estimate": est,
                      "last": float(col[-1]), "slope_h": slope, "verdict": _verdict(col)})
    estimates = np.array([p["estimate"] for p in per_R])
    verdicts = {p["verdict"] for p in per_R}
    if len(verdicts) == 1:
        verdict = verdicts.pop()
    elif verdicts <= {"decreasing", "constant"}:
        verdict = "nonincreasing"
    else:
        verdict = "mixed"
    return {
        "reduce": reduce,
        "per_R": per_R,
        "estimate": float(estimates[-1]),
        "slope_R": float(np.polyfit(table.R, estimates, 1)[0]),
        "slopes": [p["slope_h"] for p in per_R],
        "verdict": verdict,
    }


# ---------------------------------------------------------------------------
# concentrating families


@dataclass(frozen=True)
class ConcentratingFamily:
    """h-indexed initial data with a rectangular evolution box per h."""

    name: str
    d: int
    builder: Callable[[float], FourierState]
    margin: tuple[int, ...]
    params: dict = field(default_factory=dict)

    def state(self, h: float) -> FourierState:
        return self.builder(h)

    def box(self, h: float) -> dict:
        u = self.state(h)
        lo = u.modes.min(axis=0) - np.asarray(self.margin)
        hi = u.modes.max(axis=0) + np.asarray(self.margin)
        return {"lo": lo.tolist(), "hi": hi.tolist()}


def _ladder(xi0: RationalVector, h: float) -> np.ndarray:
    return np.array([math.floor(Fraction(x) / Fraction(h).limit_denominator(10**12)) for x in xi0.entries],
                    dtype=np.int64)


def _margin(margin, d):
    return tuple([int(margin)] * d) if np.ndim(margin) == 0 else tuple(int(m) for m in margin)


def plane_wave_ladder(xi0, margin: int | Sequence[int] = 8) -> ConcentratingFamily:
    """e^{i⌊ξ₀/h⌋·x}, normalised."""
    xi0 = xi0 if isinstance(xi0, RationalVector) else RationalVector(xi0)
    d = xi0.dim

    def build(h):
        return FourierState.plane_wave(_ladder(xi0, h))

    return ConcentratingFamily("plane_wave_ladder", d, build, _margin(margin, d), {"xi0": xi0.to_json()})


def transverse_profile_family(
    profile: Mapping[tuple, complex],
    xi0,
    lam: PrimitiveModule | None = None,
    margin: int | Sequence[int] = 8,
) -> ConcentratingFamily:
    """f(x)·e^{i⌊ξ₀/h⌋·x} with f = Σ f_m e^{im·x} fixed, normalised.

    With ``lam`` given, the modes of f must lie in Λ and ξ₀ must lie in R_Λ.
    """
    xi0 = xi0 if isinstance(xi0, RationalVector) else RationalVector(xi0)
    d = xi0.dim
    prof = {tuple(int(v) for v in m): complex(c) for m, c in profile.items()}
    if lam is not None:
        from .lattice import in_resonant_set

        for m in prof:
            if not mode_in(m, lam):
                raise ValueError(f"profile mode {m} is not in {lam}")
        if not in_resonant_set(xi0, lam):
            raise ValueError(f"ξ₀ = {xi0} is not in R_Λ for {lam}")
    base = FourierState.from_dict(prof, d).normalized()

    def build(h):
        n = _ladder(xi0, h)
        return FourierState(base.modes + n, base.coeffs)

    return ConcentratingFamily(
        "transverse_profile", d, build, _margin(margin, d),
        {"xi0": xi0.to_json(), "profile": {str(list(m)): [c.real, c.imag] for m, c in prof.items()}},
    )


def gaussian_packet_family(x0: Sequence[float], xi0, width_sigmas: float = 6.0,
                           margin: int | Sequence[int] = 4) -> ConcentratingFamily:
    """Gaussian packet centred at (x₀, ξ₀) with spatial width h^{1/2}.

    û(k) ∝ exp(-h|k - ξ₀/h|²/2 - ik·x₀), truncated at ``width_sigmas``
    standard deviations in k.
    """
    xi0 = xi0 if isinstance(xi0, RationalVector) else RationalVector(xi0)
    d = xi0.dim
    x0 = np.asarray(x0, float)

    def build(h):
        centre = np.array([float(x) for x in xi0.entries]) / h
        rad = int(math.ceil(width_sigmas / math.sqrt(h)))
        c0 = np.round(centre).astype(np.int64)
        modes = box_modes(d, lo=c0 - rad, hi=c0 + rad)
        dk = modes - centre
        coeffs = np.exp(-0.5 * h * np.sum(dk**2, axis=1) - 1j * modes @ x0)
        return FourierState(modes, coeffs).normalized()

    return ConcentratingFamily("gaussian_packet", d, build, _margin(margin, d),
                               {"x0": x0.tolist(), "xi0": xi0.to_json()})


# ---------------------------------------------------------------------------
# propagation law


def propagation_law_test(
    family: ConcentratingFamily,
    V: Potential,
    lam: PrimitiveModule,
    b: Symbol,
    T: float,
    h_grid: Sequence[float] = DEFAULT_H_GRID,
    R_grid: Sequence[float] = (16.0, 32.0),
    n_times: int = 21,
    lam_radius: int | None = None,
    times: Sequence[float] | None = None,
) -> LimitTable:
    """|lhs - rhs| on the (h, R, t) grid.

    lhs(t) is the inner two-microlocal pairing of U_V(t)u_h with b; rhs(t)
    is Tr(M_b U_{⟨V⟩_Λ}(t) σ U*) with σ the proxy of u_h.  The full and the
    averaged evolutions use matching truncations along Λ.  ``extra`` keeps
    the lhs and rhs arrays.  ``times`` overrides the uniform grid of
    ``n_times`` samples on [0, T].
    """
    for m in b.terms:
        if not mode_in(m, lam):
            raise ValueError(f"b has the mode {m} outside Λ")
    if family.d != lam.dim:
        raise ValueError("family and module dimensions differ")
    bt = b.with_module(lam)
    geom = geometry(lam)
    P = geom.projector_float
    ts = np.linspace(0.0, T, n_times) if times is None else np.asarray(times, float)
    hs = np.asarray(h_grid, float)
    Rs = np.asarray(R_grid, float)
    dev = np.zeros((len(hs), len(Rs), len(ts)))
    lhs = np.zeros_like(dev)
    rhs = np.zeros_like(dev)
    for i, h in enumerate(hs):
        u0 = family.state(h)
        box = family.box(h)
        plan = make_plan(V, box)
        traj = propagate_many(plan, u0.on_modes(plan.int_modes), ts)
        # Λ-side truncation of the averaged plan follows the full box
        if lam_radius is None:
            proj = plan.int_modes.astype(float) @ P.T
            lam_rad = int(math.ceil(np.abs(proj).max())) + 1
        else:
            lam_rad = lam_radius
        for j, R in enumerate(Rs):
            cut = Cutoff(R)
            A = operator_matrix(bt, h, plan.int_modes, eta_projector=P,
                                weight=lambda mid, cut=cut: cut.chi(mid @ P.T))
            left = np.real(np.einsum("ti,ij,tj->t", np.conj(traj), A, traj))
            proxy = sigma_proxy(u0, lam, h, cut)
            shifts = coset_shifts(lam, proxy.index)
            avg = averaged_propagator(lam, V, lam_rad, shifts=shifts)
            avg = _restrict_to_box(avg, lam, plan, shifts)
            right = nu_lambda(b, proxy, avg, ts)
            lhs[i, j] = left
            rhs[i, j] = right
            dev[i, j] = np.abs(left - right)
    return LimitTable(hs, Rs, ts, dev, "deviation", {"lhs": lhs, "rhs": rhs})


def _restrict_to_box(avg: PropagatorPlan, lam: PrimitiveModule, plan: PropagatorPlan, shifts) -> PropagatorPlan:
    """Keep the averaged modes whose P_Λ-image is met by the full box."""
    geom = geometry(lam)
    wanted = {geom.project(k) for k in plan.int_modes}
    keep = [i for i, m in enumerate(avg.keys) if tuple(Fraction(x) for x in m) in wanted]
    if len(keep) == avg.size:
        return avg
    keys = tuple(avg.keys[i] for i in keep)
    H = avg.hamiltonian[np.ix_(keep, keep)]
    w, W = np.linalg.eigh(H)
    int_modes = avg.int_modes[keep] if avg.int_modes is not None else None
    return PropagatorPlan(avg.potential, avg.freqs[keep], keys, "eigenbasis", None, H, w, W, lam, int_modes)


# ---------------------------------------------------------------------------
# marginals and disintegration


def grid_boxes(d: int, width: float, extent: float) -> list[tuple[np.ndarray, np.ndarray]]:
    """Half-open cubes of side ``width`` centred on width·Z^d, covering [-extent, extent]^d."""
    n = int(math.ceil(extent / width - 0.5))
    centres = np.arange(-n, n + 1) * width
    boxes = []
    for c in np.array(np.meshgrid(*([centres] * d), indexing="ij")).reshape(d, -1).T:
        boxes.append((c - width / 2, c + width / 2))
    return boxes


def _check_boxes(boxes):
    los = np.array([b[0] for b in boxes], float)
    his = np.array([b[1] for b in boxes], float)
    if np.any(his <= los):
        raise ValueError("every box needs lo < hi")
    for i in range(len(boxes)):
        overlap = np.all((los[i] < his[i + 1:]) & (los[i + 1:] < his[i]), axis=1)
        if overlap.any():
            j = i + 1 + int(np.nonzero(overlap)[0][0])
            raise ValueError(f"boxes {i} and {j} overlap")
    return los, his


def _box_membership(freqs: np.ndarray, los: np.ndarray, his: np.ndarray) -> np.ndarray:
    """Index of the box containing each point, -1 when none."""
    inside = np.all((freqs[:, None, :] >= los[None]) & (freqs[:, None, :] < his[None]), axis=2)
    idx = np.where(inside.any(axis=1), inside.argmax(axis=1), -1)
    return idx


def marginal_xi(u: FourierState, h: float, boxes) -> np.ndarray:
    """Mass Σ_{hk ∈ F}|û(k)|² for each half-open box F."""
    los, his = _check_boxes(boxes)
    out = np.zeros(len(boxes))
    if len(u) == 0:
        return out
    idx = _box_membership(h * u.modes.astype(float), los, his)
    np.add.at(out, idx[idx >= 0], np.abs(u.coeffs[idx >= 0]) ** 2)
    return out


def histogram_variation(states: Sequence[FourierState], h: float, boxes) -> float:
    """max_t Σ_F |p_t(F) - p_0(F)| over a sequence of states."""
    p0 = marginal_xi(states[0], h, boxes)
    return max(float(np.abs(marginal_xi(s, h, boxes) - p0).sum()) for s in states)


@dataclass(frozen=True, eq=False)
class TimeSamples:
    """Trajectory samples with quadrature weights normalised to sum 1."""

    modes: np.ndarray
    coeffs: np.ndarray  # (n_t, n_modes)
    times: np.ndarray
    weights: np.ndarray

    def state(self, i: int) -> FourierState:
        return FourierState(self.modes, self.coeffs[i])


def sample_trajectory(plan: PropagatorPlan, u0: FourierState, T: float, panels_per_unit: int = 1000) -> TimeSamples:
    times, w = simpson_weights(T, int(math.ceil(panels_per_unit * T)))
    C = propagate_many(plan, u0.on_modes(plan.int_modes), times)
    return TimeSamples(plan.int_modes, C, times, w / T)


def conditional_density(samples: TimeSamples, h: float, boxes, grid: int | Sequence[int] = 32,
                        threshold: float = 1e-8) -> list[np.ndarray | None]:
    """Per ξ-box time-averaged x-density of the filtered state, normalised by box mass.

    Boxes whose time-averaged mass is below ``threshold`` give None.
    """
    los, his = _check_boxes(boxes)
    d = samples.modes.shape[1]
    M = (int(grid),) * d if np.ndim(grid) == 0 else tuple(int(g) for g in grid)
    member = _box_membership(h * samples.modes.astype(float), los, his)
    out: list[np.ndarray | None] = []
    for F in range(len(boxes)):
        sel = member == F
        if not sel.any():
            out.append(None)
            continue
        C = samples.coeffs[:, sel]
        mass = float(samples.weights @ np.sum(np.abs(C) ** 2, axis=1))
        if mass < threshold:
            out.append(None)
            continue
        vals = _grid_values(samples.modes[sel], C, M)
        dens = np.tensordot(samples.weights, np.abs(vals) ** 2, axes=1)
        out.append(dens / mass)
    return out


def flow_invariance_defect(
    u0: FourierState,
    a: Symbol,
    h: float,
    tau: float,
    T: float,
    cutoff: Cutoff | None = None,
    side: str = "inner",
    box: int | dict | None = None,
    n_times: int = 401,
) -> float:
    """|⟨a⟩ - ⟨a∘φ_τ⟩| for the time-averaged Wigner pairing of the free evolution.

    With a module-tagged ``a`` and a ``cutoff`` the pairing is two-microlocal.
    """
    d = u0.dim
    if box is None:
        box = {"lo": (u0.modes.min(axis=0) - 1).tolist(), "hi": (u0.modes.max(axis=0) + 1).tolist()}
    plan = make_plan(Potential.zero(d), box, scheme="exact-free")
    times, w = simpson_weights(T, n_times - 1)
    traj = propagate_many(plan, u0.on_modes(plan.int_modes), times)

    def avg_pair(sym):
        if cutoff is None:
            A = operator_matrix(sym, h, plan.int_modes)
        else:
            geom = geometry(sym.module)
            P = geom.projector_float
            A = operator_matrix(sym, h, plan.int_modes, eta_projector=P, weight=_side_weight(geom, cutoff, side))
        vals = np.einsum("ti,ij,tj->t", np.conj(traj), A, traj)
        return complex(w @ vals) / T

    return abs(avg_pair(a) - avg_pair(a.flowed(tau)))
