"""Observability Gram operators for the Schrödinger group on T^d.

The observation set ω is a finite union of disjoint half-open axis-aligned
boxes, so the Fourier coefficients of its indicator are exact products of
one-dimensional arc coefficients.  With c_m = (2π)^{-d}∫_ω e^{-im·x}dx the
Gram matrix on the box |k|_inf <= N is

    G[j, k] = ∫_0^T ⟨U(t)e_j, 1_ω U(t)e_k⟩ dt,

which for V = 0 equals c_{j-k}·Φ(T, (|j|²-|k|²)/2) with
Φ(T, δ) = ∫_0^T e^{iδt} dt.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.linalg

from ._modes import box_modes
from .dynamics import Potential, energy_window, make_plan, simpson_weights
from .quantization import FourierState

__all__ = [
    "ObservationSpec",
    "GramOperator",
    "arc_coefficients",
    "phi",
    "gram",
    "gram_quadrature",
    "observability_constant",
    "windowed_constant",
    "quotient",
    "corollary_lower_bound_check",
    "observability_csv",
    "C_INFINITE_THRESHOLD",
]

C_INFINITE_THRESHOLD = 1e-12
_TWO_PI = 2 * math.pi


def _unit(v) -> float:
    if isinstance(v, str):
        return float(Fraction(v))
    return float(v)


def arc_coefficients(a: float, b: float, ks: np.ndarray) -> np.ndarray:
    """(1/2π)∫_a^b e^{-ikx}dx for integer k (a, b in radians)."""
    ks = np.asarray(ks)
    out = np.empty(ks.shape, dtype=np.complex128)
    zero = ks == 0
    out[zero] = (b - a) / _TWO_PI
    k = ks[~zero].astype(float)
    out[~zero] = (np.exp(-1j * k * a) - np.exp(-1j * k * b)) / (_TWO_PI * 1j * k)
    return out


@dataclass(frozen=True)
class ObservationSpec:
    """ω as disjoint boxes; ``boxes[i][axis] = (lo, hi)`` in units of 2π."""

    boxes: tuple
    T: float
    name: str = "omega"

    def __init__(self, boxes: Sequence, T: float, name: str = "omega"):
        clean = []
        for box in boxes:
            arcs = tuple((_unit(lo), _unit(hi)) for lo, hi in box)
            clean.append(arcs)
        if not clean:
            raise ValueError("ω needs at least one box")
        d = len(clean[0])
        if d == 0 or any(len(b) != d for b in clean):
            raise ValueError("all boxes must have the same dimension d >= 1")
        for i, b in enumerate(clean):
            for lo, hi in b:
                if not (0.0 <= lo < hi <= 1.0):
                    raise ValueError(f"box {i}: arc [{lo}, {hi}) must satisfy 0 <= lo < hi <= 1 (units of 2π)")
        for i in range(len(clean)):
            for j in range(i + 1, len(clean)):
                if all(a[0] < b[1] and b[0] < a[1] for a, b in zip(clean[i], clean[j])):
                    raise ValueError(f"boxes {i} and {j} overlap")
        if not T > 0:
            raise ValueError("T must be positive")
        object.__setattr__(self, "boxes", tuple(clean))
        object.__setattr__(self, "T", float(T))
        object.__setattr__(self, "name", str(name))

    @classmethod
    def full_torus(cls, d: int, T: float) -> "ObservationSpec":
        return cls([[(0.0, 1.0)] * d], T, "full")

    @property
    def dim(self) -> int:
        return len(self.boxes[0])

    @property
    def measure(self) -> float:
        """Lebesgue measure of ω."""
        return math.fsum(math.prod(_TWO_PI * (hi - lo) for lo, hi in b) for b in self.boxes)

    def coefficients(self, ms: np.ndarray) -> np.ndarray:
        """c_m = (2π)^{-d}∫_ω e^{-im·x}dx for each row m."""
        ms = np.asarray(ms, dtype=np.int64).reshape(-1, self.dim)
        total = np.zeros(len(ms), dtype=np.complex128)
        for b in self.boxes:
            term = np.ones(len(ms), dtype=np.complex128)
            for axis, (lo, hi) in enumerate(b):
                term *= arc_coefficients(_TWO_PI * lo, _TWO_PI * hi, ms[:, axis])
            total += term
        return total

    def indicator(self, x: np.ndarray) -> np.ndarray:
        x = np.mod(np.asarray(x, float).reshape(-1, self.dim), _TWO_PI) / _TWO_PI
        out = np.zeros(len(x), dtype=bool)
        for b in self.boxes:
            inside = np.ones(len(x), dtype=bool)
            for axis, (lo, hi) in enumerate(b):
                inside &= (x[:, axis] >= lo) & (x[:, axis] < hi)
            out |= inside
        return out

    def multiplier(self, modes: np.ndarray) -> np.ndarray:
        """Matrix of multiplication by 1_ω on the given modes."""
        modes = np.asarray(modes, dtype=np.int64)
        diff = (modes[:, None, :] - modes[None, :, :]).reshape(-1, self.dim)
        return self.coefficients(diff).reshape(len(modes), len(modes))

    def to_json(self) -> dict:
        return {"name": self.name, "T": self.T, "boxes": [[list(a) for a in b] for b in self.boxes]}

    @classmethod
    def from_json(cls, data: Mapping) -> "ObservationSpec":
        return cls(data["boxes"], data["T"], data.get("name", "omega"))


def phi(T: float, delta) -> np.ndarray:
    """∫_0^T e^{iδt}dt, evaluated stably near δ = 0."""
    delta = np.asarray(delta, dtype=float)
    half = 0.5 * delta * T
    return T * np.exp(1j * half) * np.sinc(half / np.pi)


@dataclass(frozen=True, eq=False)
class GramOperator:
    spec: ObservationSpec
    potential: Potential
    N: int
    modes: np.ndarray
    matrix: np.ndarray

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix)

    def hermiticity_defect(self) -> float:
        return float(np.abs(self.matrix - self.matrix.conj().T).max())


def _check_V(V: Potential, d: int):
    if V.is_time_dependent:
        raise ValueError("observability needs a time-independent potential")
    if V.dim != d:
        raise ValueError("potential and ω have different dimensions")


def gram(spec: ObservationSpec, V: Potential | None, N: int) -> GramOperator:
    """Gram matrix on |k|_inf <= N; closed form for V = 0, eigenbasis otherwise."""
    d = spec.dim
    V = V if V is not None else Potential.zero(d)
    _check_V(V, d)
    modes = box_modes(d, int(N))
    Om = spec.multiplier(modes)
    if not V.coeffs:
        e = 0.5 * np.sum(modes.astype(float) ** 2, axis=1)
        G = Om * phi(spec.T, e[:, None] - e[None, :])
    else:
        plan = make_plan(V, int(N), scheme="eigenbasis")
        W, lam = plan.eigvecs, plan.eigvals
        Om_e = W.conj().T @ Om @ W
        G_e = Om_e * phi(spec.T, lam[:, None] - lam[None, :])
        G = W @ G_e @ W.conj().T
    G = 0.5 * (G + G.conj().T)
    return GramOperator(spec, V, int(N), modes, G)


def gram_quadrature(spec: ObservationSpec, V: Potential | None, N: int, panels: int = 10_000) -> np.ndarray:
    """Oracle: composite Simpson in t of U(t)^* 1_ω U(t), U(dt) from a matrix exponential."""
    d = spec.dim
    V = V if V is not None else Potential.zero(d)
    _check_V(V, d)
    modes = box_modes(d, int(N))
    H = np.diag(0.5 * np.sum(modes.astype(float) ** 2, axis=1)).astype(np.complex128)
    H = H + V.matrix(modes)
    Om = spec.multiplier(modes)
    times, w = simpson_weights(spec.T, panels)
    step = scipy.linalg.expm(-1j * H * (times[1] - times[0]))
    U = np.eye(len(modes), dtype=np.complex128)
    G = np.zeros_like(Om)
    for i, wi in enumerate(w):
        if i:
            U = step @ U
        G += wi * (U.conj().T @ Om @ U)
    return G


def observability_constant(G: GramOperator | np.ndarray) -> tuple[float, float]:
    """(λ_min, C = 1/λ_min); C = inf when λ_min <= 1e-12."""
    M = G.matrix if isinstance(G, GramOperator) else np.asarray(G)
    lam = float(np.linalg.eigvalsh(M).min())
    C = math.inf if lam <= C_INFINITE_THRESHOLD else 1.0 / lam
    return lam, C


def windowed_constant(G: GramOperator, h: float, chi: Callable = energy_window,
                      threshold: float = 1e-12) -> tuple[float, float]:
    """Constant on the range of the smooth spectral window χ(h²H).

    Uses the energy basis of the same truncation; eigenvectors with χ weight
    below ``threshold`` are dropped, so the result is the Rayleigh minimum of
    G over Ran χ(h²H).
    """
    plan = make_plan(G.potential, G.N, scheme="eigenbasis")
    keep = np.asarray(chi(h * h * plan.eigvals)) > threshold
    if not keep.any():
        raise ValueError("the spectral window is empty at this truncation")
    Q = plan.eigvecs[:, keep]
    return observability_constant(Q.conj().T @ G.matrix @ Q)


def quotient(u0: FourierState, spec: ObservationSpec, V: Potential | None = None,
             N: int | None = None, G: GramOperator | None = None) -> float:
    """(∫_0^T ‖U(t)u0‖²_{L²(ω)}dt)/‖u0‖² = ⟨u0, G u0⟩/‖u0‖²."""
    nrm2 = u0.norm() ** 2
    if nrm2 == 0:
        raise ValueError("quotient is undefined for the zero state")
    if G is None:
        G = gram(spec, V, max(u0.radius, N or 0))
    v = u0.on_modes(G.modes, strict=True)
    return float(np.real(np.conj(v) @ G.matrix @ v)) / nrm2


def corollary_lower_bound_check(states: Mapping[float, FourierState] | Sequence[FourierState],
                                spec: ObservationSpec, V: Potential | None = None,
                                slack: float = 1e-8) -> list[dict]:
    """Check ∫_0^T mass_ω(t)dt >= ‖u‖²/C_emp for every family member.

    C_emp = 1/λ_min of the Gram matrix at the member's own truncation
    (N = its mode radius).
    """
    items = states.items() if isinstance(states, Mapping) else enumerate(states)
    report = []
    for label, u in items:
        G = gram(spec, V, u.radius)
        lam, C = observability_constant(G)
        v = u.on_modes(G.modes, strict=True)
        integral = float(np.real(np.conj(v) @ G.matrix @ v))
        bound = u.norm() ** 2 / C if math.isfinite(C) else 0.0
        report.append({"member": label, "N": G.N, "integral": integral, "lambda_min": lam,
                       "bound": bound, "ok": integral >= bound - slack})
    return report


def observability_csv(rows: Sequence[Mapping]) -> str:
    """CSV with columns N, T, omega-id, lambda_min, C."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["N", "T", "omega-id", "lambda_min", "C"])
    for r in rows:
        w.writerow([int(r["N"]), repr(float(r["T"])), r["omega_id"], repr(float(r["lambda_min"])),
                    "inf" if math.isinf(r["C"]) else repr(float(r["C"]))])
    return buf.getvalue()
