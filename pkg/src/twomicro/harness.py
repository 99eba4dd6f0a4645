"""Declarative experiment specs, deterministic runs and result persistence.

A spec is a JSON document.  Floats may be given as numbers or decimal
strings, rationals as "p/q" strings; serialisation writes floats as decimal
strings so that ``serialize(parse(text))`` is a fixed point.  Every output
file is produced from the spec alone (seeded randomness only), so running
the same spec twice gives byte-identical files; only ``record.json`` carries
timestamps.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import __version__
from ._modes import box_modes
from .dynamics import Potential, make_plan, propagate_many
from .lattice import (
    NON_RESONANT,
    PrimitiveModule,
    RationalVector,
    classify,
    resonance_order,
    row_hnf,
    saturate,
)
from .microlocal import (
    ConcentratingFamily,
    LimitTable,
    conditional_density,
    gaussian_packet_family,
    grid_boxes,
    histogram_variation,
    limit_extrapolate,
    marginal_xi,
    plane_wave_ladder,
    propagation_law_test,
    sample_trajectory,
    transverse_profile_family,
)
from .observability import ObservationSpec, gram, observability_constant
from .quantization import BoxEscapeError, Cutoff, FourierState, Symbol, twomicro_pair, wigner_pair

__all__ = [
    "KINDS",
    "FAMILIES",
    "THREADS_ENV",
    "SpecValidationError",
    "InvariantViolation",
    "ExperimentSpec",
    "RunRecord",
    "SnapResult",
    "snap_frequency",
    "parse_spec",
    "load_spec",
    "run",
    "emit_plot_data",
    "resolve_threads",
]

KINDS = ("classify", "evolve", "wigner", "twomicro", "sigma-propagation", "marginal", "disintegration", "observability")
FAMILIES = ("plane_wave", "plane_wave_pair", "plane_wave_ladder", "transverse_profile", "gaussian_packet", "random", "state")
RANDOM_FAMILIES = ("random",)
THREADS_ENV = "TWOMICRO_THREADS"
SNAP_RESIDUAL = 1e-9
INVARIANT_TOL = 1e-10

_FIELDS = ("kind", "d", "N", "T", "h_grid", "R_grid", "t_samples", "potential", "family", "modules",
           "symbol", "observation", "frequencies", "options", "output")


class SpecValidationError(ValueError):
    """Rejected spec; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class InvariantViolation(ArithmeticError):
    """A numerical invariant failed during a run."""


# ---------------------------------------------------------------------------
# parsing helpers


def _num(v, name: str) -> float:
    if isinstance(v, bool):
        raise SpecValidationError(name, "expected a number")
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        try:
            return float(Fraction(v)) if "/" in v else float(v)
        except (ValueError, ZeroDivisionError):
            pass
    raise SpecValidationError(name, f"expected a number, got {v!r}")


def _int(v, name: str) -> int:
    if isinstance(v, bool):
        raise SpecValidationError(name, "expected an integer")
    if isinstance(v, int):
        return v
    if isinstance(v, str) and v.strip().lstrip("-").isdigit():
        return int(v)
    if isinstance(v, float) and v.is_integer():
        return int(v)
    raise SpecValidationError(name, f"expected an integer, got {v!r}")


def _rational(v, name: str) -> Fraction:
    if isinstance(v, bool):
        raise SpecValidationError(name, "expected a rational")
    if isinstance(v, int):
        return Fraction(v)
    if isinstance(v, str):
        try:
            return Fraction(v.strip())
        except (ValueError, ZeroDivisionError):
            pass
    if isinstance(v, float):
        raise SpecValidationError(name, f"float {v!r} is not exact; write it as a 'p/q' or decimal string")
    raise SpecValidationError(name, f"expected a rational, got {v!r}")


def _fstr(x: float) -> str:
    return repr(float(x))


def _rstr(q: Fraction) -> str:
    return str(q.numerator) if q.denominator == 1 else f"{q.numerator}/{q.denominator}"


def _float_list(v, name: str) -> tuple[float, ...]:
    if not isinstance(v, (list, tuple)):
        raise SpecValidationError(name, "expected a list")
    return tuple(_num(x, f"{name}[{i}]") for i, x in enumerate(v))


# ---------------------------------------------------------------------------
# spec


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    d: int
    N: int | None = None
    T: float | None = None
    h_grid: tuple[float, ...] = ()
    R_grid: tuple[float, ...] = ()
    t_samples: tuple[float, ...] = ()
    potential: Potential | None = None
    family: dict | None = None
    modules: tuple[PrimitiveModule, ...] = ()
    symbol: dict | None = None
    observation: ObservationSpec | None = None
    frequencies: tuple[RationalVector, ...] = ()
    options: dict = field(default_factory=dict)
    output: str | None = None

    # serialisation ------------------------------------------------------

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind, "d": self.d}
        if self.N is not None:
            out["N"] = self.N
        if self.T is not None:
            out["T"] = _fstr(self.T)
        for name in ("h_grid", "R_grid", "t_samples"):
            vals = getattr(self, name)
            if vals:
                out[name] = [_fstr(x) for x in vals]
        if self.potential is not None:
            pj = self.potential.to_json()
            for e in pj["modes"]:
                e["re"], e["im"] = _fstr(e["re"]), _fstr(e["im"])
            out["potential"] = pj
        if self.family is not None:
            out["family"] = _canonical(self.family)
        if self.modules:
            out["modules"] = [[list(b) for b in m.basis] for m in self.modules]
        if self.symbol is not None:
            out["symbol"] = _canonical(self.symbol)
        if self.observation is not None:
            oj = self.observation.to_json()
            oj["T"] = _fstr(oj["T"])
            oj["boxes"] = [[[_fstr(lo), _fstr(hi)] for lo, hi in b] for b in oj["boxes"]]
            out["observation"] = oj
        if self.frequencies:
            out["frequencies"] = [[_rstr(q) for q in xi.entries] for xi in self.frequencies]
        if self.options:
            out["options"] = _canonical(self.options)
        if self.output is not None:
            out["output"] = self.output
        return out

    def serialize(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    def spec_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    # derived objects ----------------------------------------------------

    @property
    def module(self) -> PrimitiveModule | None:
        return self.modules[0] if self.modules else None

    def build_symbol(self) -> Symbol:
        if self.symbol is None:
            raise SpecValidationError("symbol", f"kind {self.kind!r} needs a symbol")
        try:
            return Symbol.from_config(self.symbol, self.d, module=self.module if self.kind == "twomicro" else None)
        except (KeyError, ValueError, TypeError) as exc:
            raise SpecValidationError("symbol", str(exc)) from None

    def build_family(self) -> ConcentratingFamily:
        if self.family is None:
            raise SpecValidationError("family", f"kind {self.kind!r} needs a data family")
        try:
            return _family(self.family, self.d, self.module, self.N)
        except SpecValidationError:
            raise
        except (KeyError, ValueError, TypeError) as exc:
            raise SpecValidationError("family", str(exc)) from None

    def horizon(self) -> float:
        if self.T is not None:
            return self.T
        if self.t_samples:
            return max(self.t_samples)
        raise SpecValidationError("T", f"kind {self.kind!r} needs T or t_samples")


def _canonical(obj):
    """Floats as decimal strings, everything else unchanged (recursively)."""
    if isinstance(obj, bool) or obj is None:
        return obj
    if isinstance(obj, float):
        return _fstr(obj)
    if isinstance(obj, Mapping):
        return {str(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    return obj


def _decimal_floats(obj):
    """Inverse of :func:`_canonical` for symbol configs: numeric strings become floats."""
    if isinstance(obj, Mapping):
        return {k: _decimal_floats(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decimal_floats(v) for v in obj]
    if isinstance(obj, str):
        try:
            return float(obj)
        except ValueError:
            return obj
    return obj


def _parse_module(gens, d: int, name: str) -> PrimitiveModule:
    if not isinstance(gens, (list, tuple)) or not gens:
        raise SpecValidationError(name, "expected a non-empty list of generator vectors")
    try:
        vecs = [[_int(x, name) for x in v] for v in gens]
    except TypeError:
        raise SpecValidationError(name, "generators must be integer vectors") from None
    if any(len(v) != d for v in vecs):
        raise SpecValidationError(name, f"generators must have length d={d}")
    sat = saturate(vecs, d)
    given = row_hnf(vecs, d)
    if [list(r) for r in given] != [list(r) for r in sat.basis]:
        suggestion = [list(b) for b in sat.basis]
        raise SpecValidationError(name, f"generators span a non-primitive (or non-canonical) module; use the saturated basis {suggestion}")
    return sat


def parse_spec(data: Mapping | str) -> ExperimentSpec:
    """Validate a spec mapping (or JSON text); errors name the offending field."""
    if isinstance(data, str):
        try:
            data = json.loads(data)
        except json.JSONDecodeError as exc:
            raise SpecValidationError("<document>", f"invalid JSON: {exc}") from None
    if not isinstance(data, Mapping):
        raise SpecValidationError("<document>", "spec must be a JSON object")
    unknown = sorted(set(data) - set(_FIELDS))
    if unknown:
        raise SpecValidationError(unknown[0], "unknown field")
    kind = data.get("kind")
    if kind not in KINDS:
        raise SpecValidationError("kind", f"must be one of {', '.join(KINDS)}")
    if "d" not in data:
        raise SpecValidationError("d", "missing")
    d = _int(data["d"], "d")
    if d < 1:
        raise SpecValidationError("d", "must be >= 1")
    kw: dict[str, Any] = {"kind": kind, "d": d}
    if "N" in data:
        kw["N"] = _int(data["N"], "N")
        if kw["N"] < 0:
            raise SpecValidationError("N", "must be >= 0")
    if "T" in data:
        kw["T"] = _num(data["T"], "T")
        if not kw["T"] > 0:
            raise SpecValidationError("T", "must be positive")
    for name in ("h_grid", "R_grid", "t_samples"):
        if name in data:
            kw[name] = _float_list(data[name], name)
    hs = kw.get("h_grid", ())
    if any(h <= 0 for h in hs) or any(b >= a for a, b in zip(hs, hs[1:])):
        raise SpecValidationError("h_grid", "must be positive and strictly decreasing")
    Rs = kw.get("R_grid", ())
    if any(R <= 0 for R in Rs) or any(b <= a for a, b in zip(Rs, Rs[1:])):
        raise SpecValidationError("R_grid", "must be positive and strictly increasing")
    ts = kw.get("t_samples", ())
    if any(t < 0 for t in ts) or any(b <= a for a, b in zip(ts, ts[1:])):
        raise SpecValidationError("t_samples", "must be nonnegative and strictly increasing")
    if "potential" in data:
        try:
            kw["potential"] = Potential.from_json(_decimal_floats(data["potential"]), d)
        except (KeyError, ValueError, TypeError) as exc:
            raise SpecValidationError("potential", str(exc)) from None
        if kw["potential"].dim != d:
            raise SpecValidationError("potential", "dimension differs from d")
    if "modules" in data:
        mods = data["modules"]
        if not isinstance(mods, list):
            raise SpecValidationError("modules", "expected a list of generator lists")
        kw["modules"] = tuple(_parse_module(g, d, f"modules[{i}]") for i, g in enumerate(mods))
    if "family" in data:
        fam = data["family"]
        if not isinstance(fam, Mapping) or fam.get("name") not in FAMILIES:
            raise SpecValidationError("family", f"needs a name among {', '.join(FAMILIES)}")
        if fam["name"] in RANDOM_FAMILIES and "seed" not in fam:
            raise SpecValidationError("family.seed", "mandatory for randomized families")
        if "seed" in fam:
            _int(fam["seed"], "family.seed")
        unknown = sorted(set(fam) - {"name", "params", "seed"})
        if unknown:
            raise SpecValidationError(f"family.{unknown[0]}", "unknown field")
        kw["family"] = {"name": fam["name"], "params": dict(fam.get("params", {}))}
        if "seed" in fam:
            kw["family"]["seed"] = _int(fam["seed"], "family.seed")
    if "symbol" in data:
        if not isinstance(data["symbol"], Mapping) or "xmode" not in data["symbol"]:
            raise SpecValidationError("symbol", "needs an 'xmode' list")
        kw["symbol"] = _decimal_floats(dict(data["symbol"]))
    if "observation" in data:
        ob = data["observation"]
        try:
            boxes = [[(_num(a[0], "observation.boxes"), _num(a[1], "observation.boxes")) for a in b] for b in ob["boxes"]]
            kw["observation"] = ObservationSpec(boxes, _num(ob.get("T", kw.get("T", 0.0)), "observation.T"),
                                                str(ob.get("name", "omega")))
        except SpecValidationError:
            raise
        except (KeyError, ValueError, TypeError, IndexError) as exc:
            raise SpecValidationError("observation", str(exc)) from None
        if kw["observation"].dim != d:
            raise SpecValidationError("observation", "box dimension differs from d")
    if "frequencies" in data:
        fr = data["frequencies"]
        if not isinstance(fr, list):
            raise SpecValidationError("frequencies", "expected a list of vectors")
        vecs = []
        for i, v in enumerate(fr):
            if not isinstance(v, list) or len(v) != d:
                raise SpecValidationError(f"frequencies[{i}]", f"expected a vector of length {d}")
            vecs.append(RationalVector([_rational(x, f"frequencies[{i}]") for x in v]))
        kw["frequencies"] = tuple(vecs)
    if "options" in data:
        if not isinstance(data["options"], Mapping):
            raise SpecValidationError("options", "expected an object")
        kw["options"] = _decimal_floats(dict(data["options"]))
    if "output" in data:
        kw["output"] = str(data["output"])
    spec = ExperimentSpec(**kw)
    _check_kind_requirements(spec)
    return spec


_REQUIRED = {
    "classify": ("frequencies",),
    "evolve": ("family", "t_samples"),
    "wigner": ("family", "symbol", "h_grid"),
    "twomicro": ("family", "symbol", "h_grid", "R_grid", "modules"),
    "sigma-propagation": ("family", "symbol", "h_grid", "R_grid", "modules", "t_samples"),
    "marginal": ("family", "h_grid", "t_samples"),
    "disintegration": ("family", "h_grid"),
    "observability": ("observation",),
}


def _check_kind_requirements(spec: ExperimentSpec):
    for name in _REQUIRED[spec.kind]:
        val = getattr(spec, name)
        if val is None or (isinstance(val, tuple) and not val):
            raise SpecValidationError(name, f"required for kind {spec.kind!r}")
    if spec.kind in ("disintegration",):
        spec.horizon()
    if spec.kind == "observability" and spec.potential is not None and spec.potential.is_time_dependent:
        raise SpecValidationError("potential", "observability needs a time-independent potential")
    if spec.kind in ("twomicro", "sigma-propagation"):
        if spec.module.rank < 1:
            raise SpecValidationError("modules[0]", "needs rank >= 1")
    if spec.kind == "sigma-propagation":
        if spec.potential is not None and spec.potential.is_time_dependent:
            raise SpecValidationError("potential", "the averaged propagator needs a time-independent potential")
        from .lattice import mode_in

        for m in spec.symbol["xmode"]:
            if not mode_in(m, spec.module):
                raise SpecValidationError("symbol", f"x-mode {m} is not in modules[0]")
    spec.build_family() if spec.family is not None else None
    spec.build_symbol() if spec.symbol is not None else None


def load_spec(path: str | os.PathLike) -> ExperimentSpec:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise SpecValidationError("--spec", str(exc)) from None
    return parse_spec(text)


# ---------------------------------------------------------------------------
# families


def _fixed_family(name: str, d: int, state: FourierState, margin) -> ConcentratingFamily:
    return ConcentratingFamily(name, d, lambda h, s=state: s, _margin_tuple(margin, d))


def _margin_tuple(margin, d):
    if isinstance(margin, (list, tuple)):
        return tuple(int(m) for m in margin)
    return (int(margin),) * d


def _family(cfg: Mapping, d: int, module: PrimitiveModule | None, N: int | None) -> ConcentratingFamily:
    name, p = cfg["name"], cfg.get("params", {})
    margin = p.get("margin", 8 if name in ("plane_wave_ladder", "transverse_profile") else 2)
    if name == "plane_wave":
        return _fixed_family(name, d, FourierState.plane_wave([_int(x, "family.params.k") for x in p["k"]]), margin)
    if name == "plane_wave_pair":
        k1 = [_int(x, "family.params.k1") for x in p["k1"]]
        k2 = [_int(x, "family.params.k2") for x in p["k2"]]
        if k1 == k2:
            raise SpecValidationError("family.params", "k1 and k2 must differ")
        st = FourierState.from_dict({tuple(k1): 1.0, tuple(k2): 1.0}).normalized()
        return _fixed_family(name, d, st, margin)
    if name == "random":
        rng = np.random.default_rng(int(cfg["seed"]))
        st = FourierState.random(d, _int(p.get("radius", 4), "family.params.radius"), rng)
        return _fixed_family(name, d, st, margin)
    if name == "state":
        return _fixed_family(name, d, FourierState.from_json(p), margin)
    xi0 = RationalVector([_rational(x, "family.params.xi0") for x in p["xi0"]])
    if xi0.dim != d:
        raise SpecValidationError("family.params.xi0", f"expected length {d}")
    if name == "plane_wave_ladder":
        return plane_wave_ladder(xi0, margin)
    if name == "transverse_profile":
        prof = {tuple(_int(v, "family.params.profile") for v in e["k"]):
                complex(_num(e.get("re", 0.0), "family.params.profile"), _num(e.get("im", 0.0), "family.params.profile"))
                for e in p["profile"]}
        return transverse_profile_family(prof, xi0, module, margin)
    if name == "gaussian_packet":
        x0 = [_num(x, "family.params.x0") for x in p.get("x0", [0.0] * d)]
        return gaussian_packet_family(x0, xi0, _num(p.get("width_sigmas", 6.0), "family.params.width_sigmas"), margin)
    raise SpecValidationError("family", f"unknown family {name!r}")


# ---------------------------------------------------------------------------
# snapping


@dataclass(frozen=True)
class SnapResult:
    vector: RationalVector
    residuals: tuple[float, ...]
    token: str | None

    @property
    def module(self) -> PrimitiveModule:
        """Λ for the snapped vector, or {0} when tagged non-resonant."""
        if self.token == NON_RESONANT:
            return PrimitiveModule.zero(self.vector.dim)
        return classify(self.vector)

    def report(self) -> dict:
        return {"vector": self.vector.to_json(), "residuals": list(self.residuals),
                "max_residual": max(self.residuals, default=0.0), "token": self.token}


def snap_frequency(x: Sequence[float], max_den: int) -> SnapResult:
    """Best rational per entry with denominator <= max_den (continued fractions)."""
    if int(max_den) < 1:
        raise ValueError("max_den must be >= 1")
    qs, res = [], []
    for v in x:
        q = Fraction(float(v)).limit_denominator(int(max_den))
        qs.append(q)
        res.append(abs(float(v) - float(q)))
    token = NON_RESONANT if any(r > SNAP_RESIDUAL for r in res) else None
    return SnapResult(RationalVector(qs), tuple(res), token)


# ---------------------------------------------------------------------------
# run records


@dataclass
class RunRecord:
    spec_hash: str
    version: str
    started: str
    finished: str
    out_dir: str
    outputs: list[str]
    summary: dict
    tables: dict = field(default_factory=dict, repr=False)

    def to_json(self) -> dict:
        return {"spec_hash": self.spec_hash, "version": self.version, "started": self.started,
                "finished": self.finished, "outputs": self.outputs, "summary": self.summary}


def resolve_threads(threads: int | None = None) -> int:
    """Explicit value, else the environment default, else 1."""
    if threads is not None:
        n = int(threads)
    else:
        env = os.environ.get(THREADS_ENV, "").strip()
        try:
            n = int(env) if env else 1
        except ValueError:
            raise SpecValidationError(THREADS_ENV, f"not an integer: {env!r}") from None
    if n < 1:
        raise SpecValidationError("--threads", "must be >= 1")
    return n


def _pmap(fn: Callable, items: Sequence, threads: int) -> list:
    """Ordered map; the result order never depends on the pool."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def _cell(v):
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return "inf" if math.isinf(f) else repr(f)
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def _scalar(v):
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return "inf" if math.isinf(f) else f
    if isinstance(v, np.integer):
        return int(v)
    return v


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def run(spec: ExperimentSpec, out_dir: str | os.PathLike | None = None, threads: int | None = None) -> RunRecord:
    """Execute the pipeline for ``spec.kind`` and write its outputs."""
    threads = resolve_threads(threads)
    started = _now()
    handler = _HANDLERS[spec.kind]
    tables, summary = handler(spec, threads)
    target = Path(out_dir or spec.output or f"out-{spec.kind}")
    target.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name, (header, rows) in tables.items():
        path = target / f"{name}.csv"
        path.write_text(_csv(header, rows), encoding="utf-8")
        outputs.append(path.name)
    summary = {k: _scalar(v) for k, v in summary.items()}
    (target / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    (target / "spec.json").write_text(spec.serialize(), encoding="utf-8")
    outputs += ["summary.json", "spec.json"]
    rec = RunRecord(spec.spec_hash(), __version__, started, _now(), str(target), outputs, summary, tables)
    (target / "record.json").write_text(json.dumps(rec.to_json(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return rec


def emit_plot_data(record: RunRecord, out_dir: str | os.PathLike | None = None) -> list[str]:
    """Long-format CSV per table (one observation per row, labelled axes)."""
    target = Path(out_dir or record.out_dir)
    target.mkdir(parents=True, exist_ok=True)
    written = []
    for name, (header, rows) in record.tables.items():
        plot_header, plot_rows = _PLOT_VIEWS.get(name, lambda h, r: (h, r))(header, rows)
        path = target / f"plot_{name}.csv"
        path.write_text(_csv(plot_header, plot_rows), encoding="utf-8")
        written.append(str(path))
    return written


def _observability_view(header, rows):
    i_n, i_l = header.index("N"), header.index("lambda_min")
    return ["N", "lambda_min"], [[r[i_n], r[i_l]] for r in rows]


_PLOT_VIEWS = {"observability": _observability_view}


# ---------------------------------------------------------------------------
# handlers (each returns ({table name: (header, rows)}, summary))


def _box_for(spec: ExperimentSpec, fam: ConcentratingFamily, h: float):
    if spec.N is not None and fam.name in ("plane_wave", "plane_wave_pair", "random", "state"):
        return spec.N
    return fam.box(h)


def _plan(spec: ExperimentSpec, fam: ConcentratingFamily, h: float):
    V = spec.potential or Potential.zero(spec.d)
    scheme = spec.options.get("scheme")
    dt = float(spec.options.get("dt", 1e-3))
    return make_plan(V, _box_for(spec, fam, h), scheme=scheme, dt=dt)


def _trajectory(spec, fam, h, times):
    plan = _plan(spec, fam, h)
    u0 = fam.state(h)
    try:
        v0 = u0.on_modes(plan.int_modes, strict=True)
    except BoxEscapeError:
        raise
    C = propagate_many(plan, v0, np.asarray(times, float))
    drift = float(np.abs(np.linalg.norm(C, axis=1) - u0.norm()).max()) if len(C) else 0.0
    if drift > float(spec.options.get("norm_tol", 1e-8)):
        raise InvariantViolation(f"norm drift {drift:.3e} at h={h}")
    return plan, u0, C


def _h_values(spec):
    return spec.h_grid or (float(spec.options.get("h", 1.0)),)


def _run_classify(spec, threads):
    rows = []
    for xi in spec.frequencies:
        lam = classify(xi)
        rows.append([" ".join(_rstr(q) for q in xi.entries), lam.rank, resonance_order(xi),
                     json.dumps([list(b) for b in lam.basis], separators=(",", ":"))])
    return {"classify": (["xi", "rank", "order", "basis"], rows)}, {"count": len(rows)}


def _run_evolve(spec, threads):
    fam = spec.build_family()
    h = _h_values(spec)[0]
    plan, u0, C = _trajectory(spec, fam, h, spec.t_samples)
    d = spec.d
    rows = []
    for t, c in zip(spec.t_samples, C):
        for k, v in zip(plan.int_modes, c):
            if v != 0:
                rows.append([t, *[int(x) for x in k], float(v.real), float(v.imag)])
    tables = {"evolve": (["t", *[f"k{i + 1}" for i in range(d)], "re", "im"], rows)}
    summary = {"modes": plan.size, "scheme": plan.scheme, "max_norm_drift": float(np.abs(np.linalg.norm(C, axis=1) - u0.norm()).max())}
    if "density_grid" in spec.options:
        from .dynamics import time_averaged_density, x_grid

        M = int(spec.options["density_grid"])
        dens = time_averaged_density(plan, u0, spec.horizon(), grid=M,
                                     panels_per_unit=int(spec.options.get("panels_per_unit", 1000)))
        tables["density"] = _density_table(dens, d)
        summary["density_flatness"] = float(np.abs(dens - (2 * np.pi) ** (-d) * u0.norm() ** 2).max())
    return tables, summary


def _density_table(dens: np.ndarray, d: int, prefix: Sequence = ()):
    from .dynamics import x_grid

    xs = x_grid(dens.shape)
    rows = []
    for idx in np.ndindex(*dens.shape):
        rows.append([*prefix, *[float(xs[a][i]) for a, i in enumerate(idx)], float(dens[idx])])
    return [f"x{i + 1}" for i in range(d)] + ["value"], rows


def _times(spec):
    return spec.t_samples or (0.0,)


def _run_wigner(spec, threads):
    fam, a = spec.build_family(), spec.build_symbol()
    ts = _times(spec)

    def cell(h):
        plan, _, C = _trajectory(spec, fam, h, ts)
        out = []
        for t, c in zip(ts, C):
            w = wigner_pair(FourierState(plan.int_modes, c), a, h)
            out.append([h, t, w.real, w.imag])
        return out

    rows = [r for block in _pmap(cell, _h_values(spec), threads) for r in block]
    return {"wigner": (["h", "t", "re", "im"], rows)}, {"cells": len(rows)}


def _run_twomicro(spec, threads):
    fam, a = spec.build_family(), spec.build_symbol()
    lam = spec.module
    ts = _times(spec)

    def cell(h):
        plan, _, C = _trajectory(spec, fam, h, ts)
        out, worst = [], 0.0
        for t, c in zip(ts, C):
            u = FourierState(plan.int_modes, c)
            uncut = wigner_pair(u, a, h, eta_module=lam)
            for R in spec.R_grid:
                cut = Cutoff(R)
                inner = twomicro_pair(u, a, h, cut, "inner")
                outer = twomicro_pair(u, a, h, cut, "outer")
                worst = max(worst, abs(inner + outer - uncut))
                out += [[h, R, t, "inner", inner.real], [h, R, t, "outer", outer.real], [h, R, t, "uncut", uncut.real]]
        return out, worst

    results = _pmap(cell, spec.h_grid, threads)
    worst = max(w for _, w in results)
    if worst > INVARIANT_TOL:
        raise InvariantViolation(f"inner + outer differs from the uncut pairing by {worst:.3e}")
    rows = [r for block, _ in results for r in block]
    return {"twomicro": (["h", "R", "t", "side", "value"], rows)}, {"sum_defect": worst}


def _table_rows(table: LimitTable, values=None):
    vals = table.values if values is None else values
    return [[float(h), float(R), float(t), float(vals[i, j, k])]
            for i, h in enumerate(table.h) for j, R in enumerate(table.R) for k, t in enumerate(table.t)]


def _run_sigma(spec, threads):
    fam, b = spec.build_family(), spec.build_symbol()
    V = spec.potential or Potential.zero(spec.d)
    ts = spec.t_samples

    def cell(h):
        return propagation_law_test(fam, V, spec.module, b, max(ts), [h], spec.R_grid, times=ts)

    parts = _pmap(cell, spec.h_grid, threads)
    table = LimitTable(
        np.array(spec.h_grid), np.array(spec.R_grid), np.array(ts),
        np.concatenate([p.values for p in parts]), "deviation",
        {k: np.concatenate([p.extra[k] for p in parts]) for k in ("lhs", "rhs")},
    )
    header = ["h", "R", "t", "value"]
    tables = {
        "deviation": (header, _table_rows(table)),
        "lhs": (header, _table_rows(table, table.extra["lhs"])),
        "rhs": (header, _table_rows(table, table.extra["rhs"])),
    }
    summary: dict = {"max_deviation": float(table.values.max()),
                     "signal_scale": float(np.abs(table.extra["lhs"]).max())}
    if len(table.h) >= 3 and len(table.R) >= 2:
        ext = limit_extrapolate(table)
        summary.update({"estimate": ext["estimate"], "slope_R": ext["slope_R"], "verdict": ext["verdict"]})
    return tables, summary


def _boxes(spec):
    return grid_boxes(spec.d, float(spec.options.get("box_width", 0.25)), float(spec.options.get("box_extent", 2.0)))


def _run_marginal(spec, threads):
    fam = spec.build_family()
    boxes = _boxes(spec)
    ts = spec.t_samples

    def cell(h):
        plan, _, C = _trajectory(spec, fam, h, ts)
        states = [FourierState(plan.int_modes, c) for c in C]
        rows = []
        for t, s in zip(ts, states):
            hist = marginal_xi(s, h, boxes)
            rows += [[h, t, i, float(m)] for i, m in enumerate(hist) if m != 0]
        return rows, histogram_variation(states, h, boxes)

    results = _pmap(cell, spec.h_grid, threads)
    rows = [r for block, _ in results for r in block]
    var_rows = [[h, v] for h, (_, v) in zip(spec.h_grid, results)]
    summary = {f"variation_h={h!r}": v for h, v in var_rows}
    return {"marginal": (["h", "t", "box", "mass"], rows), "variation": (["h", "variation"], var_rows)}, summary


def _run_disintegration(spec, threads):
    fam = spec.build_family()
    boxes = _boxes(spec)
    T = spec.horizon()
    M = int(spec.options.get("grid", 32))
    ppu = int(spec.options.get("panels_per_unit", 1000))

    def cell(h):
        plan = _plan(spec, fam, h)
        samples = sample_trajectory(plan, fam.state(h), T, ppu)
        dens = conditional_density(samples, h, boxes, M)
        rows = []
        for i, dn in enumerate(dens):
            if dn is not None:
                rows += _density_table(dn, spec.d, prefix=(h, i))[1]
        return rows, sum(dn is not None for dn in dens)

    results = _pmap(cell, spec.h_grid, threads)
    header = ["h", "box"] + [f"x{i + 1}" for i in range(spec.d)] + ["value"]
    rows = [r for block, _ in results for r in block]
    summary = {f"boxes_h={h!r}": n for h, (_, n) in zip(spec.h_grid, results)}
    return {"disintegration": (header, rows)}, summary


def _run_observability(spec, threads):
    ob = spec.observation
    V = spec.potential or Potential.zero(spec.d)
    Ns = [int(n) for n in spec.options.get("N_grid", [spec.N if spec.N is not None else 4])]

    def cell(N):
        G = gram(ob, V, N)
        defect = G.hermiticity_defect()
        ev = G.eigenvalues()
        if defect > INVARIANT_TOL or ev.min() < -INVARIANT_TOL or ev.max() > ob.T * (1 + INVARIANT_TOL):
            raise InvariantViolation(f"Gram matrix at N={N} violates 0 <= G <= T")
        lam, C = observability_constant(G)
        return [N, ob.T, ob.name, lam, C]

    rows = _pmap(cell, Ns, threads)
    summary = {"lambda_min": min(r[3] for r in rows), "N_max": max(Ns)}
    return {"observability": (["N", "T", "omega-id", "lambda_min", "C"], rows)}, summary


_HANDLERS: dict[str, Callable] = {
    "classify": _run_classify,
    "evolve": _run_evolve,
    "wigner": _run_wigner,
    "twomicro": _run_twomicro,
    "sigma-propagation": _run_sigma,
    "marginal": _run_marginal,
    "disintegration": _run_disintegration,
    "observability": _run_observability,
}
