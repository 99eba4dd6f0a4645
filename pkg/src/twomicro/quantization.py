"""Weyl quantization on the torus through exact Fourier matrix elements.

Conventions
-----------
A state is ``u(x) = (2π)^{-d/2} Σ_k û(k) e^{ik·x}`` so that ``‖u‖² = Σ|û(k)|²``.

A symbol is stored by its *plain* x-Fourier coefficients,
``a(x, ξ, η) = Σ_m a_m(ξ, η) e^{im·x}``.  With this normalisation the Weyl
matrix element is

    ⟨e_j, Op_h(a) e_k⟩ = a_{j-k}(h(j+k)/2, η)

(the same number as ``(2π)^{-d/2} â_{j-k}`` with ``â`` the unitary Fourier
coefficient).  The η-slot is only used by the two-microlocal pairings, where it
is set to ``P_Λ(j+k)/2``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from ._modes import ModeIndex, as_mode_array, box_modes, lexsort_modes, pairs_with_difference
from .lattice import ModuleGeometry, PrimitiveModule, geometry, mode_in

__all__ = [
    "FourierState",
    "Symbol",
    "Cutoff",
    "operator_matrix",
    "matrix_element",
    "apply",
    "wigner_pair",
    "commutator_defect",
    "average_symbol",
    "twomicro_pair",
    "nested_twomicro_pair",
    "sqrt_symbol_defect",
    "operator_norm",
    "cv_seminorm",
    "smooth_step",
    "BoxEscapeError",
]


class BoxEscapeError(RuntimeError):
    """An operation would need modes outside the configured box."""


# ---------------------------------------------------------------------------
# states


@dataclass(frozen=True, eq=False)
class FourierState:
    """Finitely supported Fourier coefficients on T^d.

    ``modes`` is an (n, d) integer array in lexicographic order without
    repeats; ``coeffs`` the matching complex amplitudes û(k).
    """

    modes: np.ndarray
    coeffs: np.ndarray

    def __post_init__(self):
        modes = as_mode_array(self.modes)
        coeffs = np.asarray(self.coeffs, dtype=np.complex128).reshape(-1)
        if len(coeffs) != len(modes):
            raise ValueError("modes and coeffs differ in length")
        order = lexsort_modes(modes)
        modes = np.ascontiguousarray(modes[order])
        coeffs = np.ascontiguousarray(coeffs[order])
        if len(modes) > 1 and np.any(np.all(np.diff(modes, axis=0) == 0, axis=1)):
            raise ValueError("duplicate modes in FourierState")
        modes.flags.writeable = False
        coeffs.flags.writeable = False
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def dim(self) -> int:
        return self.modes.shape[1]

    def __len__(self):
        return len(self.coeffs)

    @property
    def radius(self) -> int:
        """Smallest N with the support inside ``|k|_inf <= N``."""
        return int(np.abs(self.modes).max()) if len(self.modes) else 0

    @classmethod
    def zeros(cls, d: int) -> "FourierState":
        return cls(np.zeros((0, d), dtype=np.int64), np.zeros(0))

    @classmethod
    def plane_wave(cls, k: Sequence[int], amplitude: complex = 1.0) -> "FourierState":
        k = np.asarray(k, dtype=np.int64).reshape(1, -1)
        return cls(k, np.array([amplitude], dtype=np.complex128))

    @classmethod
    def from_dict(cls, data: Mapping[tuple, complex], d: int | None = None) -> "FourierState":
        if not data:
            if d is None:
                raise ValueError("empty state needs an explicit dimension")
            return cls.zeros(d)
        keys = list(data)
        return cls(np.array(keys, dtype=np.int64).reshape(len(keys), -1), np.array([data[k] for k in keys]))

    @classmethod
    def random(cls, d: int, radius: int, rng: np.random.Generator, normalize: bool = True) -> "FourierState":
        modes = box_modes(d, radius)
        c = rng.standard_normal(len(modes)) + 1j * rng.standard_normal(len(modes))
        st = cls(modes, c)
        return st.normalized() if normalize else st

    def norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.coeffs) ** 2)))

    def normalized(self) -> "FourierState":
        n = self.norm()
        if n == 0:
            raise ValueError("cannot normalise the zero state")
        return FourierState(self.modes, self.coeffs / n)

    def as_dict(self) -> dict[tuple, complex]:
        return {tuple(int(x) for x in k): complex(c) for k, c in zip(self.modes, self.coeffs)}

    def coefficient(self, k) -> complex:
        idx = ModeIndex(self.modes).lookup(np.asarray(k).reshape(1, -1))[0]
        return complex(self.coeffs[idx]) if idx >= 0 else 0j

    def on_modes(self, modes: np.ndarray, strict: bool = True) -> np.ndarray:
        """Coefficient vector on the given mode list.

        With ``strict`` a support mode missing from ``modes`` raises
        :class:`BoxEscapeError` instead of being dropped.
        """
        modes = as_mode_array(modes, self.dim)
        out = np.zeros(len(modes), dtype=np.complex128)
        if len(self.modes) == 0:
            return out
        idx = ModeIndex(modes).lookup(self.modes)
        keep = idx >= 0
        if strict and not keep.all():
            bad = self.modes[~keep][0]
            raise BoxEscapeError(f"state mode {tuple(int(x) for x in bad)} lies outside the box")
        out[idx[keep]] = self.coeffs[keep]
        return out

    def restricted(self, mask: np.ndarray) -> "FourierState":
        mask = np.asarray(mask, dtype=bool)
        return FourierState(self.modes[mask], self.coeffs[mask])

    def pruned(self, tol: float = 0.0) -> "FourierState":
        return self.restricted(np.abs(self.coeffs) > tol)

    def inner(self, other: "FourierState") -> complex:
        """⟨self, other⟩, antilinear in the first slot."""
        idx = ModeIndex(other.modes).lookup(self.modes) if len(other.modes) else np.full(len(self.modes), -1)
        keep = idx >= 0
        return complex(np.sum(np.conj(self.coeffs[keep]) * other.coeffs[idx[keep]]))

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """u(x) at points ``x`` of shape (n, d), by direct summation."""
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        phase = np.exp(1j * x @ self.modes.T.astype(float))
        return (phase @ self.coeffs) / (2 * np.pi) ** (self.dim / 2)

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "modes": self.modes.tolist(),
            "re": [float(c.real) for c in self.coeffs],
            "im": [float(c.imag) for c in self.coeffs],
        }

    @classmethod
    def from_json(cls, data: dict) -> "FourierState":
        d = int(data["dim"])
        modes = np.asarray(data["modes"], dtype=np.int64).reshape(-1, d)
        return cls(modes, np.asarray(data["re"], float) + 1j * np.asarray(data["im"], float))


# ---------------------------------------------------------------------------
# cutoffs


def _psi(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos])
    return out


def smooth_step(t):
    """C^∞ step: 0 for t <= 0, 1 for t >= 1."""
    a = _psi(t)
    b = _psi(1.0 - np.asarray(t, dtype=float))
    return a / (a + b)


def bump(r):
    """Smooth radial bump: 1 on [0, 1], 0 on [2, ∞)."""
    return 1.0 - smooth_step(np.asarray(r, dtype=float) - 1.0)


@dataclass(frozen=True)
class Cutoff:
    """χ(v/R) with χ = bump², so that √χ = bump is smooth."""

    R: float = 1.0

    def __post_init__(self):
        if not self.R > 0:
            raise ValueError("cutoff scale R must be positive")

    def chi(self, v) -> np.ndarray:
        """χ(v/R) for an array of vectors v (last axis is the vector)."""
        return bump(np.linalg.norm(np.asarray(v, dtype=float), axis=-1) / self.R) ** 2

    def sqrt_chi(self, v) -> np.ndarray:
        return bump(np.linalg.norm(np.asarray(v, dtype=float), axis=-1) / self.R)


def radial_chi(r):
    """The scalar profile χ(r) = bump(|r|)² on R."""
    return bump(np.abs(np.asarray(r, dtype=float))) ** 2


# ---------------------------------------------------------------------------
# symbol profiles

Profile = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _broadcast(val, n) -> np.ndarray:
    out = np.asarray(val, dtype=np.complex128)
    if out.ndim == 0:
        return np.full(n, complex(out))
    return out.reshape(n)


def _parse_complex(v) -> complex:
    if isinstance(v, (list, tuple)):
        return complex(float(v[0]), float(v[1]))
    if isinstance(v, str):
        return complex(v.replace(" ", ""))
    return complex(v)


def _complex_json(c: complex):
    c = complex(c)
    return [c.real, c.imag] if c.imag else c.real


class XiProfile:
    """Callable ξ ↦ value built from a small declarative schema."""

    def __init__(self, spec: Mapping | None = None):
        spec = dict(spec or {"kind": "const", "value": 1.0})
        kind = spec.get("kind")
        if kind not in ("const", "poly", "gauss", "indicator_smoothed"):
            raise ValueError(f"unknown xi_profile kind {kind!r}")
        self.kind = kind
        self.spec = spec
        if kind == "const":
            self.value = _parse_complex(spec.get("value", 1.0))
        elif kind == "poly":
            self.terms = [
                (tuple(int(e) for e in t["exp"]), _parse_complex(t.get("coef", 1.0))) for t in spec["terms"]
            ]
        elif kind == "gauss":
            self.center = np.asarray(spec.get("center", 0.0), dtype=float)
            self.width = float(spec.get("width", 1.0))
            self.amp = _parse_complex(spec.get("amp", 1.0))
        else:
            self.center = np.asarray(spec.get("center", 0.0), dtype=float)
            self.radius = float(spec.get("radius", 1.0))

    def __call__(self, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        n = len(xi)
        if self.kind == "const":
            return np.full(n, self.value)
        if self.kind == "poly":
            out = np.zeros(n, dtype=np.complex128)
            for exp, c in self.terms:
                if len(exp) != xi.shape[1]:
                    raise ValueError("polynomial exponent has the wrong dimension")
                out += c * np.prod(xi ** np.asarray(exp), axis=1)
            return out
        if self.kind == "gauss":
            r2 = np.sum((xi - self.center) ** 2, axis=1)
            return self.amp * np.exp(-r2 / (2 * self.width**2))
        r = np.linalg.norm(xi - self.center, axis=1) / self.radius
        return bump(r).astype(np.complex128) ** 2

    def derivative(self, axis: int) -> "XiProfile | None":
        """Exact ∂_{ξ_axis} for polynomial/constant profiles, else None."""
        if self.kind == "const":
            return XiProfile({"kind": "const", "value": 0.0})
        if self.kind == "poly":
            terms = []
            for exp, c in self.terms:
                if exp[axis] > 0:
                    e = list(exp)
                    e[axis] -= 1
                    terms.append({"exp": e, "coef": _complex_json(c * exp[axis])})
            return XiProfile({"kind": "poly", "terms": terms or [{"exp": [0] * len(self.terms[0][0]), "coef": 0.0}]})
        return None


class EtaProfile:
    """η ↦ value, constant or 0-homogeneous beyond the radius R0."""

    def __init__(self, spec: Mapping | None = None, R0: float = 0.0):
        spec = dict(spec or {"kind": "const", "value": 1.0})
        kind = spec.get("kind")
        if kind not in ("const", "homogeneous"):
            raise ValueError(f"unknown eta_profile kind {kind!r}")
        self.kind = kind
        self.spec = spec
        self.R0 = float(R0)
        if kind == "const":
            self.value = _parse_complex(spec.get("value", 1.0))
        else:
            if self.R0 <= 0:
                raise ValueError("homogeneous eta_profile needs R0 > 0")
            self.const = _parse_complex(spec.get("const", 0.0))
            self.direction = np.asarray(spec["direction"], dtype=float)

    def __call__(self, eta: np.ndarray) -> np.ndarray:
        eta = np.asarray(eta, dtype=float)
        n = len(eta)
        if self.kind == "const":
            return np.full(n, self.value)
        r = np.linalg.norm(eta, axis=1)
        theta = smooth_step(2.0 * r / self.R0 - 1.0)  # 0 for r <= R0/2, 1 for r >= R0
        safe = np.where(r > 0, r, 1.0)
        return self.const + theta * (eta @ self.direction) / safe


class TermProfile:
    """coef · xi_profile(ξ) · eta_profile(η)."""

    def __init__(self, coef: complex, xi: XiProfile, eta: EtaProfile):
        self.coef = complex(coef)
        self.xi = xi
        self.eta = eta

    def __call__(self, xi, eta):
        return self.coef * self.xi(xi) * self.eta(eta)


class FunctionProfile:
    """Wrap an arbitrary vectorised callable ``f(xi, eta)``."""

    def __init__(self, func, label: str = "custom"):
        self.func = func
        self.label = label

    def __call__(self, xi, eta):
        return _broadcast(self.func(xi, eta), len(xi))


# ---------------------------------------------------------------------------
# symbols


class Symbol:
    """Band-limited-in-x symbol ``a(x, ξ, η) = Σ_m a_m(ξ, η) e^{im·x}``.

    ``terms`` maps integer x-modes to vectorised profiles ``(ξ, η) -> values``
    (arrays of shape (n, d) in, (n,) out).  ``R0`` is the radius beyond which
    the η-dependence is 0-homogeneous (0 when there is none).  ``module`` is an
    optional tag: every x-mode must then lie in that module.
    """

    def __init__(
        self,
        dim: int,
        terms: Mapping[tuple, Profile],
        R0: float = 0.0,
        module: PrimitiveModule | None = None,
        sup_bound: float | None = None,
        spec: dict | None = None,
    ):
        self.dim = int(dim)
        self.terms: dict[tuple, Profile] = {}
        for m, p in terms.items():
            m = tuple(int(x) for x in m)
            if len(m) != self.dim:
                raise ValueError(f"x-mode {m} has the wrong dimension")
            self.terms[m] = p
        self.R0 = float(R0)
        self.module = module
        self.sup_bound = sup_bound
        self.spec = spec
        if module is not None:
            if module.dim != self.dim:
                raise ValueError("module dimension mismatch")
            for m in self.terms:
                if not mode_in(m, module):
                    raise ValueError(f"x-mode {m} is not in the tagged module {module}")

    # constructors -------------------------------------------------------

    @classmethod
    def constant(cls, d: int, value: complex = 1.0) -> "Symbol":
        return cls.trig(d, {(0,) * d: value})

    @classmethod
    def xmode(cls, m: Sequence[int], amplitude: complex = 1.0) -> "Symbol":
        m = tuple(int(x) for x in m)
        return cls.trig(len(m), {m: amplitude})

    @classmethod
    def trig(cls, d: int, coeffs: Mapping[tuple, complex]) -> "Symbol":
        """Function of x only: ``a(x) = Σ c_m e^{im·x}``."""
        terms = {
            tuple(m): TermProfile(c, XiProfile(), EtaProfile())
            for m, c in coeffs.items()
        }
        spec = {
            "xmode": [list(m) for m in coeffs],
            "coef": [_complex_json(c) for c in coeffs.values()],
        }
        return cls(d, terms, sup_bound=float(sum(abs(c) for c in coeffs.values())), spec=spec)

    @classmethod
    def cos(cls, m: Sequence[int], amplitude: float = 1.0) -> "Symbol":
        """``amplitude · cos(m·x)``."""
        m = tuple(int(x) for x in m)
        neg = tuple(-x for x in m)
        if m == neg:
            return cls.trig(len(m), {m: amplitude})
        return cls.trig(len(m), {m: amplitude / 2, neg: amplitude / 2})

    @classmethod
    def of_xi(cls, d: int, profile: Mapping | Callable) -> "Symbol":
        """Symbol depending on ξ only."""
        if callable(profile):
            p = FunctionProfile(lambda xi, eta: profile(xi))
            return cls(d, {(0,) * d: p})
        return cls.from_config({"xmode": [[0] * d], "xi_profile": dict(profile)}, d)

    @classmethod
    def from_config(cls, cfg: Mapping, d: int | None = None, module: PrimitiveModule | None = None) -> "Symbol":
        """Build from the ``{"xmode", "xi_profile", "eta_profile", "R0"}`` schema.

        Optional keys: ``coef`` (one amplitude per x-mode, complex as
        ``[re, im]``) and ``real`` (add the conjugate partner of each mode so
        the symbol is real-valued; the zero mode keeps its real part).
        """
        xmodes = [tuple(int(v) for v in m) for m in cfg["xmode"]]
        if not xmodes:
            raise ValueError("symbol needs at least one x-mode")
        if d is None:
            d = len(xmodes[0])
        coefs = [_parse_complex(c) for c in cfg.get("coef", [1.0] * len(xmodes))]
        if len(coefs) != len(xmodes):
            raise ValueError("coef must have one entry per x-mode")
        R0 = float(cfg.get("R0", 0.0))
        xi = XiProfile(cfg.get("xi_profile"))
        eta = EtaProfile(cfg.get("eta_profile"), R0)
        table: dict[tuple, complex] = {}
        for m, c in zip(xmodes, coefs):
            table[m] = table.get(m, 0) + c
        if cfg.get("real"):
            for m, c in list(table.items()):
                neg = tuple(-x for x in m)
                if neg == m:
                    table[m] = complex(c.real)
                elif neg not in table:
                    table[neg] = c.conjugate()
        terms = {m: TermProfile(c, xi, eta) for m, c in table.items()}
        return cls(d, terms, R0=R0, module=module, spec=dict(cfg))

    def to_config(self) -> dict:
        if self.spec is None:
            raise ValueError("symbol was not built from the config schema")
        return dict(self.spec)

    # structure ----------------------------------------------------------

    @property
    def modes(self) -> np.ndarray:
        if not self.terms:
            return np.zeros((0, self.dim), dtype=np.int64)
        return np.array(list(self.terms), dtype=np.int64)

    @property
    def mode_radius(self) -> int:
        return int(np.abs(self.modes).max()) if self.terms else 0

    def is_zero(self) -> bool:
        return not self.terms

    def _derived(self, terms, **kw) -> "Symbol":
        opts = dict(R0=self.R0, module=self.module, sup_bound=None)
        opts.update(kw)
        return Symbol(self.dim, terms, **opts)

    def with_module(self, lam: PrimitiveModule) -> "Symbol":
        return self._derived(self.terms, module=lam, sup_bound=self.sup_bound)

    def scaled(self, c: complex) -> "Symbol":
        return self._derived({m: _scaled(p, c) for m, p in self.terms.items()})

    def __add__(self, other: "Symbol") -> "Symbol":
        if other.dim != self.dim:
            raise ValueError("dimension mismatch")
        terms = dict(self.terms)
        for m, p in other.terms.items():
            terms[m] = _summed(terms[m], p) if m in terms else p
        mod = self.module if self.module == other.module else None
        return Symbol(self.dim, terms, R0=max(self.R0, other.R0), module=mod)

    def xi_dx(self) -> "Symbol":
        """ξ·∂_x a, exact: the mode m picks up the factor i m·ξ."""
        return self._derived({m: _xi_dx(p, m) for m, p in self.terms.items()})

    def flowed(self, tau: float) -> "Symbol":
        """a∘φ_τ with φ_τ(x, ξ) = (x + τξ, ξ)."""
        return self._derived({m: _flow(p, m, tau) for m, p in self.terms.items()})

    def flowed_eta(self, tau: float) -> "Symbol":
        """a∘φ¹_τ with φ¹_τ(x, ξ, η) = (x + τη/|η|, ξ, η) (identity where η = 0)."""
        return self._derived({m: _flow_eta(p, m, tau) for m, p in self.terms.items()})

    def averaged(self, lam: PrimitiveModule) -> "Symbol":
        return average_symbol(self, lam)

    def coefficient_table(self, xi: np.ndarray, eta: np.ndarray | None = None) -> np.ndarray:
        """Array (n_modes, n_points) of a_m(ξ, η)."""
        xi = np.asarray(xi, dtype=float).reshape(-1, self.dim)
        if eta is None:
            eta = np.zeros_like(xi)
        return np.array([_broadcast(p(xi, eta), len(xi)) for p in self.terms.values()]).reshape(
            len(self.terms), len(xi)
        )

    def evaluate(self, x: np.ndarray, xi: np.ndarray, eta: np.ndarray | None = None) -> np.ndarray:
        """Pointwise values a(x_i, ξ_i, η_i)."""
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        tab = self.coefficient_table(xi, eta)
        if len(self.terms) == 0:
            return np.zeros(len(x), dtype=np.complex128)
        phase = np.exp(1j * x @ self.modes.T.astype(float))  # (n, M)
        return np.sum(phase * tab.T, axis=1)

    def sampled_sup(self, xi: np.ndarray, eta: np.ndarray | None = None) -> float:
        """max over the sample points of Σ_m |a_m(ξ, η)| (bounds sup_x |a|)."""
        tab = self.coefficient_table(xi, eta)
        return float(np.abs(tab).sum(axis=0).max()) if tab.size else 0.0

    def __repr__(self):
        tag = f", module={self.module}" if self.module is not None else ""
        return f"Symbol(d={self.dim}, modes={sorted(self.terms)}{tag})"


def _scaled(p, c):
    return FunctionProfile(lambda xi, eta: c * _broadcast(p(xi, eta), len(xi)), "scaled")


def _summed(p, q):
    return FunctionProfile(
        lambda xi, eta: _broadcast(p(xi, eta), len(xi)) + _broadcast(q(xi, eta), len(xi)), "sum"
    )


def _xi_dx(p, m):
    mv = np.asarray(m, dtype=float)
    return FunctionProfile(lambda xi, eta: 1j * (xi @ mv) * _broadcast(p(xi, eta), len(xi)), "xi_dx")


def _flow(p, m, tau):
    mv = np.asarray(m, dtype=float)
    return FunctionProfile(lambda xi, eta: np.exp(1j * tau * (xi @ mv)) * _broadcast(p(xi, eta), len(xi)), "flow")


def _flow_eta(p, m, tau):
    mv = np.asarray(m, dtype=float)

    def f(xi, eta):
        r = np.linalg.norm(eta, axis=1)
        safe = np.where(r > 0, r, 1.0)
        ph = np.where(r > 0, np.exp(1j * tau * (eta @ mv) / safe), 1.0)
        return ph * _broadcast(p(xi, eta), len(xi))

    return FunctionProfile(f, "flow_eta")


def average_symbol(a: Symbol, lam: PrimitiveModule) -> Symbol:
    """⟨a⟩_Λ: keep the x-modes lying in Λ and tag the result with Λ."""
    if lam.dim != a.dim:
        raise ValueError("dimension mismatch")
    kept = {m: p for m, p in a.terms.items() if mode_in(m, lam)}
    return Symbol(a.dim, kept, R0=a.R0, module=lam, spec=None)


# ---------------------------------------------------------------------------
# matrix elements

Weight = Callable[[np.ndarray], np.ndarray]


def _geom(lam) -> ModuleGeometry:
    if isinstance(lam, ModuleGeometry):
        return lam
    return geometry(lam)


def operator_matrix(
    a: Symbol,
    h: float,
    rows,
    cols=None,
    *,
    eta_projector: np.ndarray | None = None,
    weight: Weight | None = None,
) -> np.ndarray:
    """Dense matrix ⟨e_j, Op_h(a) e_k⟩ for j in ``rows``, k in ``cols``.

    ``weight`` multiplies each element by a function of the integer midpoint
    (j+k)/2; ``eta_projector`` fills the η-slot with P·(j+k)/2.
    """
    rows = as_mode_array(rows, a.dim)
    cols = rows if cols is None else as_mode_array(cols, a.dim)
    out = np.zeros((len(rows), len(cols)), dtype=np.complex128)
    if not a.terms or len(rows) == 0 or len(cols) == 0:
        return out
    index = ModeIndex(rows)
    for m, prof in a.terms.items():
        r, c = pairs_with_difference(index, cols, m)
        if len(r) == 0:
            continue
        mid = (rows[r] + cols[c]) / 2.0
        eta = mid @ eta_projector.T if eta_projector is not None else np.zeros_like(mid)
        vals = _broadcast(prof(h * mid, eta), len(r))
        if weight is not None:
            vals = vals * weight(mid)
        out[r, c] += vals
    return out


def matrix_element(a: Symbol, h: float, j: Sequence[int], k: Sequence[int]) -> complex:
    """⟨e_j, Op_h(a) e_k⟩ = a_{j-k}(h(j+k)/2)."""
    m = tuple(int(x) - int(y) for x, y in zip(j, k))
    if len(m) != a.dim:
        raise ValueError("dimension mismatch")
    p = a.terms.get(m)
    if p is None:
        return 0j
    mid = (np.asarray(j, float) + np.asarray(k, float)) / 2.0
    return complex(_broadcast(p(h * mid[None, :], np.zeros((1, a.dim))), 1)[0])


def apply(a: Symbol, h: float, u: FourierState, max_radius: int | None = None) -> FourierState:
    """Op_h(a) u, exactly; the support grows by the x-modes of a."""
    if a.dim != u.dim:
        raise ValueError("dimension mismatch")
    if len(u) == 0 or not a.terms:
        return FourierState.zeros(u.dim)
    out_modes = np.unique((u.modes[:, None, :] + a.modes[None, :, :]).reshape(-1, u.dim), axis=0)
    if max_radius is not None and np.abs(out_modes).max() > max_radius:
        raise BoxEscapeError(f"Op_h(a)u needs modes beyond radius {max_radius}")
    A = operator_matrix(a, h, out_modes, u.modes)
    return FourierState(out_modes, A @ u.coeffs)


def _quadratic(u: FourierState, A: np.ndarray) -> complex:
    return complex(np.conj(u.coeffs) @ (A @ u.coeffs))


def wigner_pair(
    u: FourierState,
    a: Symbol,
    h: float,
    eta_module: PrimitiveModule | ModuleGeometry | None = None,
) -> complex:
    """⟨u, Op_h(a) u⟩.

    With ``eta_module`` the η-slot is filled with ``P_Λξ/h``, i.e. this is the
    uncut pairing of ``a(x, ξ, P_Λξ/h)``.
    """
    if len(u) == 0:
        return 0j
    P = _geom(eta_module).projector_float if eta_module is not None else None
    return _quadratic(u, operator_matrix(a, h, u.modes, eta_projector=P))


def _side_weight(geom: ModuleGeometry, cutoff: Cutoff, side: str) -> Weight:
    P = geom.projector_float
    if side == "inner":
        return lambda mid: cutoff.chi(mid @ P.T)
    if side == "outer":
        return lambda mid: 1.0 - cutoff.chi(mid @ P.T)
    raise ValueError(f"side must be 'inner' or 'outer', got {side!r}")


def twomicro_pair(
    u: FourierState,
    a: Symbol,
    h: float,
    cutoff: Cutoff,
    side: str,
    module: PrimitiveModule | None = None,
) -> complex:
    """Pairing of u with w(P_Λξ/(Rh))·a(x, ξ, P_Λξ/h), w = χ (inner) or 1-χ (outer).

    At the Weyl midpoint ξ = h(j+k)/2 we have P_Λξ/h = P_Λ(j+k)/2, so the
    matrix elements do not depend on h through the η-slot.
    """
    lam = module if module is not None else a.module
    if lam is None:
        raise ValueError("two-microlocal pairing needs a symbol tagged with a module")
    if a.module is not None and module is not None and a.module != module:
        raise ValueError("symbol module tag differs from the requested module")
    if len(u) == 0:
        return 0j
    geom = geometry(lam)
    A = operator_matrix(a, h, u.modes, eta_projector=geom.projector_float, weight=_side_weight(geom, cutoff, side))
    return _quadratic(u, A)


def nested_twomicro_pair(
    u: FourierState,
    a: Symbol,
    chain: Sequence[PrimitiveModule],
    h: float,
    cutoffs: Sequence[Cutoff],
    sides: Sequence[str],
) -> complex:
    """Pairing with the product of per-level inner/outer weights along a chain.

    ``chain`` must be strictly decreasing, Λ₁ ⊋ Λ₂ ⊋ …; the η-slot uses the
    last module, which must contain the x-modes of ``a``.
    """
    if not (len(chain) == len(cutoffs) == len(sides)) or not chain:
        raise ValueError("chain, cutoffs and sides must be non-empty and of equal length")
    for big, small in zip(chain, chain[1:]):
        if big == small or not big.contains_module(small):
            raise ValueError(f"chain is not strictly decreasing at {big} ⊋ {small}")
    last = chain[-1]
    for m in a.terms:
        if not mode_in(m, last):
            raise ValueError(f"x-mode {m} is not in the last module of the chain")
    if len(u) == 0:
        return 0j
    weights = [_side_weight(geometry(lam), c, s) for lam, c, s in zip(chain, cutoffs, sides)]

    def w(mid):
        out = np.ones(len(mid))
        for f in weights:
            out = out * f(mid)
        return out

    A = operator_matrix(a, h, u.modes, eta_projector=geometry(last).projector_float, weight=w)
    return _quadratic(u, A)


def commutator_defect(a: Symbol, h: float, N: int) -> float:
    """max |⟨e_j, [-Δ/2, Op_h(a)] e_k⟩ - (1/ih)⟨e_j, Op_h(ξ·∂_x a) e_k⟩| over the N-box."""
    box = box_modes(a.dim, N)
    A = operator_matrix(a, h, box)
    kin = 0.5 * np.sum(box.astype(float) ** 2, axis=1)
    lhs = kin[:, None] * A - A * kin[None, :]
    rhs = operator_matrix(a.xi_dx(), h, box) / (1j * h)
    return float(np.abs(lhs - rhs).max()) if lhs.size else 0.0


def operator_norm(M: np.ndarray) -> float:
    """Largest singular value."""
    if M.size == 0:
        return 0.0
    return float(np.linalg.norm(M, 2))


def _grid_coefficients(a: Symbol, h: float, mids: np.ndarray, P: np.ndarray | None,
                       weight: np.ndarray, M: int, transform) -> np.ndarray:
    """x-Fourier coefficients of transform(a(x, h·mid, P·mid)·weight) on an M^d grid.

    Returns an array (n_mid, M, ..., M) of plain coefficients indexed mod M.
    """
    d = a.dim
    eta = mids @ P.T if P is not None else np.zeros_like(mids)
    tab = a.coefficient_table(h * mids, eta) * weight[None, :]  # (n_terms, n_mid)
    grid = np.zeros((len(mids),) + (M,) * d, dtype=np.complex128)
    for t, m in enumerate(a.terms):
        idx = tuple(int(x) % M for x in m)
        grid[(slice(None),) + idx] += tab[t]
    axes = tuple(range(1, d + 1))
    vals = np.fft.ifftn(grid, axes=axes) * M**d  # a(x_n) on x_n = 2πn/M
    vals = transform(vals)
    return np.fft.fftn(vals, axes=axes) / M**d


def sqrt_symbol_defect(
    a: Symbol,
    h: float,
    N: int,
    R: float | None = None,
    module: PrimitiveModule | None = None,
    grid: int = 64,
    band: int | None = None,
) -> float:
    """‖Op_h(a^R) - Op_h(√(a^R))²‖ on the N-box.

    ``a^R = a(x, ξ, P_Λξ/h)(1 - χ(P_Λξ/(Rh)))``; without ``R`` no cutoff is
    applied.  √(a^R) is not band-limited, so its x-coefficients are computed
    per midpoint by FFT on a ``grid``-point mesh and kept up to ``band``
    (default grid//4).  The square is formed through an enlarged
    intermediate box so it is not truncated.
    """
    d = a.dim
    if module is None:
        module = a.module if a.module is not None else PrimitiveModule.full(d)
    P = geometry(module).projector_float
    cut = Cutoff(R) if R is not None else None
    band = grid // 4 if band is None else band
    if 2 * (a.mode_radius + band) >= grid:
        raise ValueError("FFT grid too small for the requested band")

    def wvec(mids):
        if cut is None:
            return np.ones(len(mids))
        return 1.0 - cut.chi(mids @ P.T)

    box = box_modes(d, N)
    ext = box_modes(d, N + band)

    def sqrt_checked(vals):
        if np.any(vals.real < -1e-12) or np.any(np.abs(vals.imag) > 1e-9):
            raise ValueError("symbol is negative (or complex) at a sampled point")
        return np.sqrt(np.clip(vals.real, 0.0, None)).astype(np.complex128)

    def sqrt_matrix(rows, cols):
        mids_all = (rows[:, None, :] + cols[None, :, :]).reshape(-1, d) / 2.0
        diff = (rows[:, None, :] - cols[None, :, :]).reshape(-1, d)
        near = np.all(np.abs(diff) <= band, axis=1)
        out = np.zeros(len(mids_all), dtype=np.complex128)
        umids, inv = np.unique(mids_all[near], axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        coef = _grid_coefficients(a, h, umids, P, wvec(umids), grid, sqrt_checked)
        dn = diff[near] % grid
        out[near] = coef[(inv,) + tuple(dn[:, i] for i in range(d))]
        return out.reshape(len(rows), len(cols))

    A = operator_matrix(a, h, box, eta_projector=P, weight=wvec if cut is not None else None)
    # sample the symbol itself for negativity on the box midpoints
    mids = (box[:, None, :] + box[None, :, :]).reshape(-1, d) / 2.0
    umids = np.unique(mids, axis=0)
    _grid_coefficients(a, h, umids, P, wvec(umids), grid, sqrt_checked)
    B1 = sqrt_matrix(box, ext)
    B2 = sqrt_matrix(ext, box)
    return operator_norm(A - B1 @ B2)


def cv_seminorm(a: Symbol, h: float, mids: np.ndarray, order: int | None = None,
                eta_projector: np.ndarray | None = None) -> float:
    """Σ_{|α| <= K} sampled sup |∂_x^α a(x, h·mid)|, with K = order or d+1.

    x-derivatives are exact (mode multiplication); the sup over x is bounded by
    the sum of coefficient moduli and the sup over ξ is sampled at ``mids``.
    """
    d = a.dim
    K = d + 1 if order is None else order
    eta = mids @ eta_projector.T if eta_projector is not None else np.zeros_like(mids, dtype=float)
    tab = np.abs(a.coefficient_table(h * mids, eta))  # (n_terms, n_mid)
    if tab.size == 0:
        return 0.0
    modes = np.abs(a.modes.astype(float))
    total = 0.0
    import itertools

    for alpha in itertools.product(range(K + 1), repeat=d):
        if sum(alpha) > K:
            continue
        fac = np.prod(modes ** np.asarray(alpha, float), axis=1)
        total += float((fac[:, None] * tab).sum(axis=0).max())
    return total
