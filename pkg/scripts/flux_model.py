#!/usr/bin/env python3
"""
Flux F(x, rho) = lambda(x) h(rho) on the periodic domain [0, 1).

Holds the speed field lambda (piecewise smooth, finitely many breakpoints),
the microscopic rate g of the zero range process, the closures h built from
it (or given directly), and the mollified speed lambda * theta_eps used by
the smoothed problem.

Conventions:
  - lambda at a breakpoint is the right limit.
  - densities live in [0, rho_max]; negatives are a DomainError, values
    above rho_max a RangeError.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np

from errors import DomainError, RangeError

logger = logging.getLogger(__name__)

Piece = Union[float, Callable[[np.ndarray], np.ndarray]]

RHO_MAX_DEFAULT = 50.0
TRUNCATION_CAP = 4096
GROWTH_LIMIT = 1e-3   # g(K)/K^2 must be below this at the cap
MEMO_MIN_SIZE = 64
MEMO_ENTRIES = 8

# ── Quadrature ─────────────────────────────────────────────────────────────────
# 32 panels x 16 Gauss-Legendre points = 512 nodes per integration interval
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)
_PANELS = 32


def composite_rule(a: float, b: float) -> tuple[np.ndarray, np.ndarray]:
    edges = np.linspace(a, b, _PANELS + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    nodes = (mid[:, None] + half[:, None] * _GL_NODES[None, :]).ravel()
    weights = (half[:, None] * _GL_WEIGHTS[None, :]).ravel()
    return nodes, weights


def _bump(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    out = np.zeros_like(z)
    inside = np.abs(z) < 1.0
    zi = z[inside]
    out[inside] = np.exp(-1.0 / (1.0 - zi * zi))
    return out


_NODES, _WEIGHTS = composite_rule(-1.0, 1.0)
BUMP_MASS = float(np.dot(_WEIGHTS, _bump(_NODES)))


def _output(values: np.ndarray, like: Any):
    return float(values) if np.ndim(like) == 0 else values


# ── Speed field ────────────────────────────────────────────────────────────────
@dataclass(frozen=True, eq=False)
class SpeedField:
    """lambda(x) on [0, 1): piece k covers [breakpoints[k], breakpoints[k+1]), the last one wraps."""

    breakpoints: tuple[float, ...]
    pieces: tuple[Piece, ...]
    lambda_lo: float
    lambda_hi: float
    label: str = "custom"

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        if bp.size == 0 or bp.size != len(self.pieces):
            raise DomainError("need one piece per breakpoint and at least one breakpoint")
        if np.any(bp < 0.0) or np.any(bp >= 1.0) or np.any(np.diff(bp) <= 0.0):
            raise DomainError(f"breakpoints must be increasing in [0, 1): {self.breakpoints}")
        if not (0.0 < self.lambda_lo <= self.lambda_hi < np.inf):
            raise DomainError(f"need 0 < lambda_lo <= lambda_hi < inf, got {self.lambda_lo}, {self.lambda_hi}")
        sample = np.concatenate([np.linspace(0.0, 1.0, 4096, endpoint=False), bp])
        values = self(sample)
        slack = 1e-12 * self.lambda_hi
        if np.any(values < self.lambda_lo - slack) or np.any(values > self.lambda_hi + slack):
            raise DomainError(
                f"lambda leaves [{self.lambda_lo}, {self.lambda_hi}]: "
                f"sampled range [{values.min():.6g}, {values.max():.6g}]"
            )

    @classmethod
    def constant(cls, value: float) -> "SpeedField":
        value = float(value)
        return cls((0.0,), (value,), value, value, label=f"const:{value:g}")

    @classmethod
    def step(cls, values: Sequence[float], breakpoints: Sequence[float]) -> "SpeedField":
        values = tuple(float(v) for v in values)
        label = "step:" + "/".join(f"{v:g}" for v in values)
        return cls(tuple(float(b) for b in breakpoints), values, min(values), max(values), label=label)

    @property
    def piecewise_constant(self) -> bool:
        return not any(callable(p) for p in self.pieces)

    @property
    def epsilon(self) -> float:
        return 0.0

    def piece_index(self, x) -> np.ndarray:
        xs = np.mod(np.asarray(x, dtype=float), 1.0)
        xs = np.where(xs >= 1.0, 0.0, xs)
        idx = np.searchsorted(np.asarray(self.breakpoints), xs, side="right") - 1
        return np.where(idx < 0, len(self.breakpoints) - 1, idx)

    def __call__(self, x):
        xs = np.mod(np.atleast_1d(np.asarray(x, dtype=float)), 1.0)
        xs = np.where(xs >= 1.0, 0.0, xs)
        idx = self.piece_index(xs)
        out = np.empty_like(xs)
        for k, piece in enumerate(self.pieces):
            mask = idx == k
            if not mask.any():
                continue
            out[mask] = piece(xs[mask]) if callable(piece) else piece
        return _output(out.reshape(np.shape(x)), x)


# ── Mollifier ──────────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class MollifierKernel:
    """theta_eps(z) = theta(z / eps) / eps with theta the normalised bump exp(-1/(1-z^2))."""

    epsilon: float

    def __post_init__(self):
        if not (0.0 < self.epsilon <= 0.25):
            raise DomainError(f"mollifier scale must lie in (0, 0.25], got {self.epsilon}")

    @staticmethod
    def theta(z) -> np.ndarray:
        return _bump(z) / BUMP_MASS

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        return _output(self.theta(z / self.epsilon) / self.epsilon, z)

    def mass(self) -> float:
        nodes, weights = composite_rule(-self.epsilon, self.epsilon)
        return float(np.dot(weights, self(nodes)))


def _convolve(speed: SpeedField, kernel: MollifierKernel, x: np.ndarray) -> np.ndarray:
    eps = kernel.epsilon
    bp = np.asarray(speed.breakpoints)
    out = np.empty_like(x)
    for i, xi in enumerate(x):
        # z-values where x - eps z crosses a breakpoint (or a periodic image of one)
        cuts = ((xi - bp[None, :] - np.array([-1.0, 0.0, 1.0])[:, None]) / eps).ravel()
        cuts = np.sort(cuts[(cuts > -1.0) & (cuts < 1.0)])
        edges = np.concatenate([[-1.0], cuts, [1.0]])
        total = 0.0
        for a, b in zip(edges[:-1], edges[1:]):
            if b - a <= 0.0:
                continue
            nodes, weights = composite_rule(a, b)
            # sub-interval lies inside one piece; evaluate that piece through the field itself
            total += float(np.dot(weights, speed(xi - eps * nodes) * MollifierKernel.theta(nodes)))
        out[i] = total
    return np.clip(out, speed.lambda_lo, speed.lambda_hi)


@dataclass(frozen=True, eq=False)
class MollifiedSpeed:
    """lambda_eps = lambda * theta_eps, evaluated on demand."""

    base: SpeedField
    kernel: MollifierKernel
    # recent evaluations keyed by the raw bytes of the sample array
    _memo: dict = field(default_factory=dict, repr=False)

    @property
    def lambda_lo(self) -> float:
        return self.base.lambda_lo

    @property
    def lambda_hi(self) -> float:
        return self.base.lambda_hi

    @property
    def breakpoints(self) -> tuple[float, ...]:
        return ()

    @property
    def epsilon(self) -> float:
        return self.kernel.epsilon

    @property
    def label(self) -> str:
        return f"{self.base.label}*eps={self.kernel.epsilon:g}"

    def __call__(self, x):
        xs = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
        if xs.size < MEMO_MIN_SIZE:
            return _output(_convolve(self.base, self.kernel, xs).reshape(np.shape(x)), x)
        key = xs.tobytes()
        values = self._memo.get(key)
        if values is None:
            values = _convolve(self.base, self.kernel, xs)
            values.setflags(write=False)
            if len(self._memo) >= MEMO_ENTRIES:
                self._memo.pop(list(self._memo)[0], None)
            self._memo[key] = values
        return values.reshape(np.shape(x)).copy()


SpeedLike = Union[SpeedField, MollifiedSpeed]


def mollified_speed(model: "FluxModel", kernel: MollifierKernel, x):
    """(lambda * theta_eps)(x); F_eps(x, rho) = mollified_speed(x) h(rho)."""
    speed = model.speed.base if isinstance(model.speed, MollifiedSpeed) else model.speed
    return MollifiedSpeed(speed, kernel)(x)


# ── Rate function ──────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class RateFunction:
    """Jump rate g of the zero range process: indicator 1{k>=1}, identity k, or a table."""

    tag: str
    table: tuple[float, ...] = ()
    cap: int = TRUNCATION_CAP

    def __post_init__(self):
        if self.tag not in ("indicator", "identity", "table"):
            raise DomainError(f"unknown rate function tag {self.tag!r}")
        if self.tag == "table" and len(self.table) < 2:
            raise DomainError("a rate table needs g(0) and at least g(1)")
        k = np.arange(self.cap + 1)
        g = self(k)
        if g[0] != 0.0:
            raise DomainError("g(0) must be 0")
        if np.any(np.diff(g) < 0.0):
            raise DomainError("g must be nondecreasing")
        if np.any(g[1:] <= 0.0):
            raise DomainError("g(k) must be positive for k >= 1")
        if g[-1] / float(self.cap) ** 2 >= GROWTH_LIMIT:
            raise DomainError(f"g(K)/K^2 = {g[-1] / self.cap ** 2:.3g} at cap K={self.cap}")

    @classmethod
    def parse(cls, spec: str, cap: int = TRUNCATION_CAP) -> "RateFunction":
        spec = spec.strip()
        if spec.startswith("table:"):
            values = tuple(float(v) for v in spec[len("table:"):].split(",") if v.strip())
            return cls("table", values, cap)
        return cls(spec, (), cap)

    def __call__(self, k):
        k = np.asarray(k)
        if self.tag == "indicator":
            out = (k >= 1).astype(float)
        elif self.tag == "identity":
            out = k.astype(float)
        else:
            # monotone completion: constant at the last tabulated value
            table = np.asarray(self.table, dtype=float)
            out = table[np.minimum(k, table.size - 1)]
        return _output(out, k)

    def values(self, n_max: int) -> np.ndarray:
        return np.asarray(self(np.arange(n_max + 1)), dtype=float)

    def log_factorial(self, n_max: int) -> np.ndarray:
        """log g(n)! = sum_{k<=n} log g(k), with log g(0)! = 0."""
        g = self.values(n_max)
        out = np.zeros(n_max + 1)
        out[1:] = np.cumsum(np.log(g[1:]))
        return out

    @property
    def radius(self) -> float:
        """Radius of convergence of Z(phi) = sum phi^n / g(n)!."""
        if self.tag == "indicator":
            return 1.0
        if self.tag == "identity":
            return np.inf
        return float(self.table[-1])


# ── Closures ───────────────────────────────────────────────────────────────────
@dataclass(frozen=True, eq=False)
class Closure:
    name: str
    h: Callable[[np.ndarray], np.ndarray]
    dh: Callable[[np.ndarray], np.ndarray]
    h_inv: Optional[Callable[[np.ndarray], np.ndarray]]
    shape: str = "monotone"
    rho_m: Optional[float] = None
    sup_h: float = np.inf
    rate: Optional[RateFunction] = None
    tables: Any = None

    def __post_init__(self):
        if self.shape not in ("monotone", "convex", "concave"):
            raise DomainError(f"unknown closure shape {self.shape!r}")
        if self.shape != "monotone" and self.rho_m is None:
            raise DomainError("convex/concave closures need the extremum rho_m")
        if self.shape == "monotone" and self.h_inv is None:
            raise DomainError("monotone closures need an inverse")


def closure_from_rate(g: RateFunction, rho_max: float = RHO_MAX_DEFAULT) -> Closure:
    """h = R^{-1} with R(phi) = phi Z'(phi) / Z(phi)."""
    from zrp_core import EquilibriumTables

    tables = EquilibriumTables.build(g)
    reach = tables.reachable_density()
    if rho_max > reach:
        raise RangeError(f"rho_max={rho_max:g} beyond reachable density {reach:.6g} for g={g.tag}")

    if g.tag == "indicator":
        return Closure(
            name="zrp:indicator",
            h=lambda rho: np.asarray(rho, dtype=float) / (1.0 + np.asarray(rho, dtype=float)),
            dh=lambda rho: 1.0 / (1.0 + np.asarray(rho, dtype=float)) ** 2,
            h_inv=lambda phi: np.asarray(phi, dtype=float) / (1.0 - np.asarray(phi, dtype=float)),
            sup_h=1.0,
            rate=g,
            tables=tables,
        )
    if g.tag == "identity":
        return Closure(
            name="zrp:identity",
            h=lambda rho: np.asarray(rho, dtype=float) * 1.0,
            dh=lambda rho: np.ones_like(np.asarray(rho, dtype=float)),
            h_inv=lambda phi: np.asarray(phi, dtype=float) * 1.0,
            rate=g,
            tables=tables,
        )

    def dh(rho):
        phi = tables.fugacity(rho)
        var = tables.variance(phi)
        # phi R'(phi) = Var(eta); at phi = 0, R'(0) = 1/g(1)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(var > 0.0, phi / np.where(var > 0.0, var, 1.0), float(g(1)))
        return out

    return Closure(
        name="zrp:table",
        h=tables.fugacity,
        dh=dh,
        h_inv=tables.mean_occupation,
        sup_h=tables.radius,
        rate=g,
        tables=tables,
    )


def linear_closure() -> Closure:
    return Closure(
        name="linear",
        h=lambda rho: np.asarray(rho, dtype=float) * 1.0,
        dh=lambda rho: np.ones_like(np.asarray(rho, dtype=float)),
        h_inv=lambda phi: np.asarray(phi, dtype=float) * 1.0,
    )


def well_closure(center: float, sign: int = 1) -> Closure:
    """h = sign (rho - center)^2: convex (sign=+1) or concave (sign=-1), extremum 0 at center."""
    if sign not in (1, -1):
        raise DomainError("well sign must be +1 or -1")
    s = float(sign)
    c = float(center)
    return Closure(
        name=f"well:{'+' if sign > 0 else '-'}{c:g}",
        h=lambda rho: s * (np.asarray(rho, dtype=float) - c) ** 2,
        dh=lambda rho: 2.0 * s * (np.asarray(rho, dtype=float) - c),
        h_inv=None,
        shape="convex" if sign > 0 else "concave",
        rho_m=c,
    )


# ── Flux model ─────────────────────────────────────────────────────────────────
@dataclass(frozen=True, eq=False)
class FluxModel:
    speed: SpeedLike
    closure: Closure
    rho_max: float = RHO_MAX_DEFAULT
    # growth envelopes f <= h <= g, metadata only
    envelopes: dict = field(default_factory=dict)
    name: str = "model"

    def __post_init__(self):
        if self.rho_max <= 0.0:
            raise DomainError("rho_max must be positive")
        rho = np.linspace(0.0, self.rho_max, 513)
        h = np.asarray(self.closure.h(rho), dtype=float)
        if self.shape == "monotone":
            if np.any(np.diff(h) <= 0.0):
                raise DomainError(f"closure {self.closure.name} is not strictly increasing on [0, {self.rho_max:g}]")
        else:
            if not (0.0 <= self.closure.rho_m <= self.rho_max):
                raise DomainError("extremum rho_m outside the density range")
            xs = np.linspace(0.0, 1.0, 257, endpoint=False)
            levels = np.asarray(self.speed(xs)) * float(self.closure.h(self.closure.rho_m))
            if np.ptp(levels) > 1e-12 * max(1.0, abs(levels).max()):
                raise DomainError("F(x, rho_m(x)) is not constant in x; wells need a common extremum level")

    @property
    def shape(self) -> str:
        return self.closure.shape

    @property
    def monotone(self) -> bool:
        return self.closure.shape == "monotone"

    @property
    def rho_m(self) -> Optional[float]:
        return self.closure.rho_m

    @property
    def M0(self) -> float:
        """Extremum flux level (convex/concave) or the lowest attainable level inf_x F(x, 0) (monotone)."""
        if self.monotone:
            h0 = float(self.closure.h(0.0))
            return (self.speed.lambda_lo if h0 >= 0.0 else self.speed.lambda_hi) * h0
        return float(self.speed(0.0)) * float(self.closure.h(self.closure.rho_m))

    @property
    def epsilon(self) -> float:
        return self.speed.epsilon

    def check_density(self, rho) -> np.ndarray:
        rho = np.asarray(rho, dtype=float)
        if np.any(~np.isfinite(rho)) or np.any(rho < -1e-12):
            raise DomainError(f"density outside closure domain: min {np.nanmin(rho):.6g}")
        if np.any(rho > self.rho_max * (1.0 + 1e-12)):
            raise RangeError(f"density {rho.max():.6g} above rho_max={self.rho_max:g}")
        return rho

    def flux(self, x, rho):
        r = self.check_density(rho)
        out = np.asarray(self.speed(x)) * np.asarray(self.closure.h(np.maximum(r, 0.0)))
        return float(out) if np.ndim(x) == 0 and np.ndim(rho) == 0 else out

    def mollified(self, kernel: MollifierKernel) -> "FluxModel":
        base = self.speed.base if isinstance(self.speed, MollifiedSpeed) else self.speed
        return replace(self, speed=MollifiedSpeed(base, kernel), name=f"{self.name}[eps={kernel.epsilon:g}]")

    def unmollified(self) -> "FluxModel":
        if isinstance(self.speed, MollifiedSpeed):
            return replace(self, speed=self.speed.base, name=self.name.split("[eps=")[0])
        return self

    def max_wave_speed(self, rho_lo: float, rho_hi: float) -> float:
        """lambda_hi * max |h'| over [rho_lo, rho_hi]."""
        rho = np.linspace(max(rho_lo, 0.0), min(rho_hi, self.rho_max), 1025)
        return float(self.speed.lambda_hi * np.max(np.abs(self.closure.dh(rho))))


def eval_flux(model: FluxModel, x, rho):
    """lambda(x) h(rho); right limit at breakpoints."""
    return model.flux(x, rho)


def build_closure(kind: str, rate: Optional[RateFunction] = None, rho_max: float = RHO_MAX_DEFAULT,
                  well_center: float = 1.0, well_sign: int = 1) -> Closure:
    if kind == "zrp":
        if rate is None:
            raise DomainError("closure 'zrp' needs a rate function")
        return closure_from_rate(rate, rho_max)
    if kind == "linear":
        return linear_closure()
    if kind == "well":
        return well_closure(well_center, well_sign)
    raise DomainError(f"unknown closure {kind!r}")
