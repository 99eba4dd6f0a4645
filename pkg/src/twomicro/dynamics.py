"""Schrödinger propagation on T^d and on the sub-tori T_Λ.

The equation is ``i ∂_t u = (-Δ/2 + V) u`` with no semiclassical scaling; the
propagator is ``U_V(t) = exp(-itH)``.  Potentials are trigonometric
polynomials ``V(t, x) = Σ_k c_k f(t) e^{ik·x}`` stored by their plain
coefficients, so ``⟨e_j, V e_k⟩ = c_{j-k}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np

from ._modes import ModeIndex, as_mode_array, box_modes
from .lattice import PrimitiveModule, geometry, mode_in
from .quantization import BoxEscapeError, FourierState, bump

__all__ = [
    "Potential",
    "PropagatorPlan",
    "make_plan",
    "free_propagate",
    "propagate",
    "propagate_vector",
    "averaged_propagator",
    "spectral_cutoff",
    "energy_window",
    "time_averaged_density",
    "simpson_weights",
]


@dataclass(frozen=True)
class TimeModulation:
    """Real amplitude factor f(t) shared by the modulated modes."""

    kind: str = "cos"
    omega: float = 1.0
    phase: float = 0.0
    modes: tuple[tuple[int, ...], ...] | None = None  # None: all non-zero modes

    def __call__(self, t: float) -> float:
        if self.kind == "cos":
            return math.cos(self.omega * t + self.phase)
        if self.kind == "sin":
            return math.sin(self.omega * t + self.phase)
        if self.kind == "const":
            return 1.0
        raise ValueError(f"unknown time modulation kind {self.kind!r}")

    def applies(self, k: tuple) -> bool:
        if self.modes is None:
            return any(k)
        return k in self.modes

    def to_json(self) -> dict:
        out = {"kind": self.kind, "omega": self.omega, "phase": self.phase}
        if self.modes is not None:
            out["modes"] = [list(m) for m in self.modes]
        return out

    @classmethod
    def from_json(cls, data: Mapping) -> "TimeModulation":
        modes = data.get("modes")
        return cls(
            kind=str(data.get("kind", "cos")),
            omega=float(data.get("omega", 1.0)),
            phase=float(data.get("phase", 0.0)),
            modes=None if modes is None else tuple(tuple(int(v) for v in m) for m in modes),
        )


class Potential:
    """Real trigonometric-polynomial potential with optional time modulation."""

    def __init__(self, dim: int, coeffs: Mapping[tuple, complex] | None = None,
                 time_mod: TimeModulation | None = None, tol: float = 1e-12):
        self.dim = int(dim)
        self.coeffs: dict[tuple, complex] = {}
        for k, c in (coeffs or {}).items():
            k = tuple(int(v) for v in k)
            if len(k) != self.dim:
                raise ValueError(f"potential mode {k} has the wrong dimension")
            if c != 0:
                self.coeffs[k] = self.coeffs.get(k, 0) + complex(c)
        for k, c in self.coeffs.items():
            partner = self.coeffs.get(tuple(-v for v in k), 0)
            if abs(partner - c.conjugate()) > tol:
                raise ValueError(f"potential is not real: c_{k} and c_-k are not conjugate")
        self.time_mod = time_mod

    @classmethod
    def zero(cls, d: int) -> "Potential":
        return cls(d)

    @classmethod
    def cosines(cls, d: int, terms: Mapping[tuple, float], const: float = 0.0) -> "Potential":
        """``const + Σ amp · cos(k·x)``."""
        coeffs: dict[tuple, complex] = {}
        if const:
            coeffs[(0,) * d] = const
        for k, amp in terms.items():
            k = tuple(int(v) for v in k)
            neg = tuple(-v for v in k)
            coeffs[k] = coeffs.get(k, 0) + amp / 2
            coeffs[neg] = coeffs.get(neg, 0) + amp / 2
        return cls(d, coeffs)

    @property
    def is_time_dependent(self) -> bool:
        return self.time_mod is not None and self.time_mod.kind != "const"

    def coefficient(self, k, t: float = 0.0) -> complex:
        k = tuple(int(v) for v in k)
        c = self.coeffs.get(k, 0j)
        if c and self.time_mod is not None and self.time_mod.applies(k):
            c = c * self.time_mod(t)
        return c

    def shifted(self, c: float) -> "Potential":
        co = dict(self.coeffs)
        z = (0,) * self.dim
        co[z] = co.get(z, 0) + c
        return Potential(self.dim, co, self.time_mod)

    def averaged(self, lam: PrimitiveModule) -> "Potential":
        """⟨V⟩_Λ: drop the Fourier modes outside Λ."""
        kept = {k: c for k, c in self.coeffs.items() if mode_in(k, lam)}
        return Potential(self.dim, kept, self.time_mod)

    def matrix(self, rows: np.ndarray, cols: np.ndarray | None = None, t: float = 0.0) -> np.ndarray:
        """Galerkin matrix ⟨e_j, V(t) e_k⟩ on integer mode lists."""
        rows = as_mode_array(rows, self.dim)
        cols = rows if cols is None else as_mode_array(cols, self.dim)
        out = np.zeros((len(rows), len(cols)), dtype=np.complex128)
        index = ModeIndex(rows)
        for k in self.coeffs:
            r = index.lookup(cols + np.asarray(k, dtype=np.int64))
            c = np.nonzero(r >= 0)[0]
            out[r[c], c] += self.coefficient(k, t)
        return out

    def evaluate(self, x: np.ndarray, t: float = 0.0) -> np.ndarray:
        x = np.asarray(x, float).reshape(-1, self.dim)
        out = np.zeros(len(x), dtype=np.complex128)
        for k in self.coeffs:
            out += self.coefficient(k, t) * np.exp(1j * x @ np.asarray(k, float))
        return out.real

    def to_json(self) -> dict:
        out: dict = {
            "dim": self.dim,
            "modes": [
                {"k": list(k), "re": c.real, "im": c.imag}
                for k, c in sorted(self.coeffs.items())
            ],
        }
        if self.time_mod is not None:
            out["time_mod"] = self.time_mod.to_json()
        return out

    @classmethod
    def from_json(cls, data: Mapping, d: int | None = None) -> "Potential":
        modes = data.get("modes", [])
        if d is None:
            d = int(data["dim"]) if "dim" in data else len(modes[0]["k"])
        coeffs: dict[tuple, complex] = {}
        for entry in modes:
            k = tuple(int(v) for v in entry["k"])
            coeffs[k] = coeffs.get(k, 0) + complex(float(entry.get("re", 0.0)), float(entry.get("im", 0.0)))
        tm = data.get("time_mod")
        return cls(d, coeffs, TimeModulation.from_json(tm) if tm else None)

    def __repr__(self):
        return f"Potential(d={self.dim}, modes={sorted(self.coeffs)})"


# ---------------------------------------------------------------------------
# plans


SCHEMES = ("exact-free", "eigenbasis", "split-step")


@dataclass(frozen=True, eq=False)
class PropagatorPlan:
    """Immutable propagation data on a finite mode set.

    ``freqs`` are the ambient frequency vectors (float) of the basis modes and
    ``keys`` their exact labels (integer tuples on T^d, tuples of Fractions on
    a sub-torus with non-integer Λ-side modes).  ``hamiltonian`` is the
    Galerkin matrix of -Δ/2 + V at t = 0.
    """

    potential: Potential
    freqs: np.ndarray
    keys: tuple
    scheme: str
    dt: float | None
    hamiltonian: np.ndarray
    eigvals: np.ndarray | None
    eigvecs: np.ndarray | None
    module: PrimitiveModule | None = None
    int_modes: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.keys)

    def index_of(self, key) -> int:
        return self._lookup().get(tuple(key), -1)

    def _lookup(self) -> dict:
        cache = self.__dict__.get("_key_index")
        if cache is None:
            cache = {k: i for i, k in enumerate(self.keys)}
            object.__setattr__(self, "_key_index", cache)
        return cache

    def kinetic(self) -> np.ndarray:
        return 0.5 * np.sum(self.freqs**2, axis=1)

    def potential_matrix(self, t: float) -> np.ndarray:
        return self.hamiltonian - np.diag(self.kinetic()) if not self.potential.is_time_dependent else self._vmat(t)

    def _vmat(self, t: float) -> np.ndarray:
        if self.int_modes is None:
            raise ValueError("time-dependent potentials are only supported on integer mode boxes")
        return self.potential.matrix(self.int_modes, t=t)


def _box_from(d: int, box) -> np.ndarray:
    if isinstance(box, (int, np.integer)):
        return box_modes(d, int(box))
    if isinstance(box, dict):
        return box_modes(d, lo=box["lo"], hi=box["hi"])
    if isinstance(box, tuple) and len(box) == 2 and np.ndim(box[0]) == 1:
        return box_modes(d, lo=box[0], hi=box[1])
    return as_mode_array(box, d)


def _eigh(H: np.ndarray):
    w, W = np.linalg.eigh(H)
    return w, W


def make_plan(V: Potential, box, scheme: str | None = None, dt: float = 1e-3) -> PropagatorPlan:
    """Plan on an integer mode set.

    ``box`` is a radius N (cube), ``{"lo": [...], "hi": [...]}`` bounds, or an
    explicit (n, d) mode list.  The default scheme is ``eigenbasis`` for a
    time-independent V and ``split-step`` otherwise.
    """
    modes = _box_from(V.dim, box)
    if scheme is None:
        scheme = "split-step" if V.is_time_dependent else "eigenbasis"
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    if scheme == "exact-free" and V.coeffs:
        nonconst = [k for k in V.coeffs if any(k)]
        if nonconst or V.is_time_dependent:
            raise ValueError("exact-free scheme needs a zero (or constant) potential")
    if scheme == "eigenbasis" and V.is_time_dependent:
        raise ValueError("eigenbasis scheme needs a time-independent potential")
    freqs = modes.astype(float)
    H = np.diag(0.5 * np.sum(freqs**2, axis=1)).astype(np.complex128) + V.matrix(modes, t=0.0)
    w = W = None
    if scheme == "eigenbasis":
        w, W = _eigh(H)
    keys = tuple(tuple(int(v) for v in k) for k in modes)
    return PropagatorPlan(V, freqs, keys, scheme, dt if scheme == "split-step" else None, H, w, W,
                          None, modes)


def free_propagate(u: FourierState, t: float) -> FourierState:
    """û(k) ↦ exp(-it|k|²/2) û(k)."""
    phase = np.exp(-0.5j * t * np.sum(u.modes.astype(float) ** 2, axis=1))
    return FourierState(u.modes, u.coeffs * phase)


def _strang(plan: PropagatorPlan, v: np.ndarray, t0: float, t: float) -> np.ndarray:
    if t == 0:
        return v.copy()
    nsteps = max(1, int(math.ceil(abs(t) / plan.dt - 1e-9)))
    step = t / nsteps
    half = np.exp(-0.5j * step * plan.kinetic())
    out = v.copy()
    if not plan.potential.is_time_dependent:
        lam, Q = _eigh(plan.potential_matrix(0.0))
        expV = (Q * np.exp(-1j * step * lam)) @ Q.conj().T
        for _ in range(nsteps):
            out = half * (expV @ (half * out))
        return out
    for n in range(nsteps):
        tm = t0 + (n + 0.5) * step
        lam, Q = _eigh(plan._vmat(tm))
        out = half * out
        out = Q @ (np.exp(-1j * step * lam) * (Q.conj().T @ out))
        out = half * out
    return out


def propagate_vector(plan: PropagatorPlan, v: np.ndarray, t: float, t0: float = 0.0) -> np.ndarray:
    """U(t0 + t, t0) applied to a coefficient vector on the plan's modes."""
    v = np.asarray(v, dtype=np.complex128)
    if plan.scheme == "eigenbasis":
        W = plan.eigvecs
        return W @ (np.exp(-1j * t * plan.eigvals) * (W.conj().T @ v))
    if plan.scheme == "exact-free":
        return np.exp(-1j * t * np.real(np.diag(plan.hamiltonian))) * v
    return _strang(plan, v, t0, t)


def propagate(plan: PropagatorPlan, u0: FourierState, t: float, t0: float = 0.0) -> FourierState:
    """U_V(t)u0 on the plan box; refuses states with support outside the box."""
    if plan.int_modes is None:
        raise ValueError("propagate() needs an integer-mode plan; use propagate_vector")
    v = u0.on_modes(plan.int_modes, strict=True)
    return FourierState(plan.int_modes, propagate_vector(plan, v, t, t0))


def propagate_many(plan: PropagatorPlan, v: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Coefficient vectors at several times, shape (len(times), n)."""
    times = np.asarray(times, dtype=float)
    if plan.scheme == "eigenbasis":
        W = plan.eigvecs
        a = W.conj().T @ v
        return (np.exp(-1j * np.outer(times, plan.eigvals)) * a[None, :]) @ W.T
    out = np.empty((len(times), len(v)), dtype=np.complex128)
    cur, tcur = np.asarray(v, dtype=np.complex128), 0.0
    for i, t in enumerate(times):
        cur = propagate_vector(plan, cur, t - tcur, t0=tcur)
        tcur = t
        out[i] = cur
    return out


def averaged_propagator(
    lam: PrimitiveModule,
    V: Potential,
    N_lam: int,
    shifts: Sequence[Sequence] | None = None,
) -> PropagatorPlan:
    """Plan for -Δ_Λ/2 + ⟨V⟩_Λ on Λ-side modes.

    The basis modes are ``s + Σ c_i b_i`` for the Λ-basis b_i, ``|c|_inf <=
    N_lam`` and each shift s (exact rational vectors in ⟨Λ⟩; default only 0).
    Shifts are needed because P_Λ k for k ∈ Z^d need not lie in Λ when the
    covering degree exceeds 1.  The kinetic term is ½|m|² with m the ambient
    frequency vector.
    """
    if V.is_time_dependent:
        raise ValueError("averaged propagator is built for time-independent potentials")
    d = lam.dim
    avg = V.averaged(lam)
    shift_list = [tuple(Fraction(x) for x in s) for s in (shifts or [(0,) * d])]
    r = lam.rank
    if r == 0:
        coords = [()]
    else:
        coords = list(np.ndindex(*(2 * N_lam + 1,) * r))
    keys = []
    seen = set()
    for s in shift_list:
        for c in coords:
            cc = [int(x) - N_lam for x in c]
            m = tuple(s[i] + sum((cc[a] * lam.basis[a][i] for a in range(r)), 0) for i in range(d))
            if m not in seen:
                seen.add(m)
                keys.append(m)
    freqs = np.array([[float(x) for x in m] for m in keys], dtype=float).reshape(len(keys), d)
    n = len(keys)
    H = np.diag(0.5 * np.sum(freqs**2, axis=1)).astype(np.complex128)
    index = {m: i for i, m in enumerate(keys)}
    for k, c in avg.coeffs.items():
        for j, m in enumerate(keys):
            target = tuple(m[i] + k[i] for i in range(d))
            i = index.get(target)
            if i is not None:
                H[i, j] += c
    w, W = _eigh(H)
    int_modes = None
    if all(x.denominator == 1 for m in keys for x in m):
        int_modes = np.array([[int(x) for x in m] for m in keys], dtype=np.int64).reshape(n, d)
        keys = tuple(tuple(int(x) for x in m) for m in keys)
    else:
        keys = tuple(keys)
    return PropagatorPlan(avg, freqs, keys, "eigenbasis", None, H, w, W, lam, int_modes)


def energy_window(s):
    """Default Π_h profile: 1 on |s - 1| <= 1/4, 0 for |s - 1| >= 1/2."""
    return bump(4.0 * np.abs(np.asarray(s, dtype=float) - 1.0))


def spectral_cutoff(u: FourierState, plan: PropagatorPlan, h: float,
                    chi: Callable[[np.ndarray], np.ndarray] = energy_window) -> FourierState:
    """Π_h u = χ(h² H) u computed in the plan eigenbasis."""
    if plan.potential.is_time_dependent:
        raise ValueError("spectral cutoff needs a time-independent potential")
    if plan.eigvals is None:
        w, W = _eigh(plan.hamiltonian)
    else:
        w, W = plan.eigvals, plan.eigvecs
    if plan.int_modes is None:
        raise ValueError("spectral cutoff needs an integer-mode plan")
    v = u.on_modes(plan.int_modes, strict=True)
    weights = np.asarray(chi(h * h * w), dtype=float)
    return FourierState(plan.int_modes, W @ (weights * (W.conj().T @ v)))


def simpson_weights(T: float, panels: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and composite Simpson weights on [0, T] (panels rounded up to even)."""
    panels = max(2, int(panels) + (int(panels) % 2))
    t = np.linspace(0.0, T, panels + 1)
    w = np.ones(panels + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return t, w * (T / panels) / 3.0


def _grid_values(modes: np.ndarray, coeffs: np.ndarray, M: Sequence[int]) -> np.ndarray:
    """u on the uniform grid x_n = 2πn/M for each row of ``coeffs``."""
    d = modes.shape[1]
    lo = modes.min(axis=0)
    rel = modes - lo
    if np.any(rel.max(axis=0) >= np.asarray(M)):
        raise ValueError("x-grid too coarse for the mode box")
    grid = np.zeros((coeffs.shape[0],) + tuple(M), dtype=np.complex128)
    grid[(slice(None),) + tuple(rel[:, i] for i in range(d))] = coeffs
    vals = np.fft.ifftn(grid, axes=tuple(range(1, d + 1))) * np.prod(M)
    # the modulation e^{i lo·x} has modulus one and drops out of |u|^2
    return vals / (2 * np.pi) ** (d / 2)


def x_grid(M: Sequence[int]) -> list[np.ndarray]:
    return [2 * np.pi * np.arange(m) / m for m in M]


def time_averaged_density(
    plan: PropagatorPlan,
    u0: FourierState,
    T: float,
    grid: int | Sequence[int] = 64,
    panels_per_unit: int = 1000,
    chunk: int = 512,
) -> np.ndarray:
    """(1/T)∫_0^T |u(t, x)|² dt on the uniform grid 2πn/M (composite Simpson).

    Returns an array of shape ``grid``; the x-points are :func:`x_grid`.
    """
    if plan.int_modes is None:
        raise ValueError("density needs an integer-mode plan")
    d = u0.dim
    M = (int(grid),) * d if np.ndim(grid) == 0 else tuple(int(g) for g in grid)
    v0 = u0.on_modes(plan.int_modes, strict=True)
    times, weights = simpson_weights(T, int(math.ceil(panels_per_unit * T)))
    acc = np.zeros(M)
    if plan.scheme == "eigenbasis":
        for start in range(0, len(times), chunk):
            ts = times[start:start + chunk]
            C = propagate_many(plan, v0, ts)
            vals = _grid_values(plan.int_modes, C, M)
            acc += np.tensordot(weights[start:start + chunk], np.abs(vals) ** 2, axes=1)
    else:
        cur, tcur = v0, 0.0
        for t, w in zip(times, weights):
            cur = propagate_vector(plan, cur, t - tcur, t0=tcur)
            tcur = t
            vals = _grid_values(plan.int_modes, cur[None, :], M)[0]
            acc += w * np.abs(vals) ** 2
    return acc / T
