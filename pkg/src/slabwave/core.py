"""Scales, layer profiles, grids and complex-field containers shared by all modules.

Coordinates are the rescaled non-dimensional ones: a point is ``x = (x', z)``
with ``z`` the vertical axis, the slab occupying ``-L < z < 0``, air above and
water below.  All containers are immutable after construction and safe to
share across parallel workers.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Scales",
    "LayerStack",
    "Grid",
    "ComplexField",
    "RegimeReport",
    "scales_from_physical",
    "regime_report",
    "principal_sqrt",
    "save_field",
    "load_field",
]


# ---------------------------------------------------------------------------
# non-dimensional parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Scales:
    """Non-dimensional parameter set tying physical inputs to the rescaled model.

    Attributes
    ----------
    lambda0, ell_c, H : float
        Central wavelength, inclusion scale and platform height, in meters.
    eta : float
        lambda0 / H.
    eps : float
        ell_c / lambda0.
    beta : float
        eps * eta, the rescaled fluctuation scale.
    k : float
        2*pi / eta, the rescaled wavenumber.
    sigma : float
        Standard deviation of the medium fluctuations.
    alpha : float
        Artificial absorption, > 0.
    """

    lambda0: float
    ell_c: float
    H: float
    eta: float
    eps: float
    beta: float
    k: float
    sigma: float
    alpha: float

    def __post_init__(self):
        if not (0.0 < self.eta < 1.0 and 0.0 < self.eps < 1.0):
            raise ValueError("eta and eps must lie in (0, 1)")
        if not (0.0 < self.beta < 1.0):
            raise ValueError("beta must lie in (0, 1)")
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")
        if not math.isclose(self.beta, self.eps * self.eta, rel_tol=1e-12):
            raise ValueError("beta must equal eps * eta")
        if not math.isclose(self.k, 2.0 * math.pi / self.eta, rel_tol=1e-12):
            raise ValueError("k must equal 2*pi/eta")


def scales_from_physical(lambda0: float, ell_c: float, H: float,
                         sigma: float, alpha: float) -> Scales:
    """Build the non-dimensional parameter set from physical lengths.

    Requires the scale separation ``ell_c < lambda0 < H`` (all positive).
    """
    if lambda0 <= 0 or ell_c <= 0 or H <= 0:
        raise ValueError("lengths must be positive")
    if not (ell_c < lambda0 < H):
        raise ValueError(
            "scale separation violated: need ell_c < lambda0 < H, got "
            f"ell_c={ell_c}, lambda0={lambda0}, H={H}")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    eta = lambda0 / H
    eps = ell_c / lambda0
    return Scales(lambda0=lambda0, ell_c=ell_c, H=H, eta=eta, eps=eps,
                  beta=eps * eta, k=2.0 * math.pi / eta,
                  sigma=sigma, alpha=alpha)


@dataclass(frozen=True)
class RegimeReport:
    """Outcome of the small-corrector regime check."""

    d: int
    ratio: float
    margin: float
    ok: bool


def regime_report(s: Scales, d: int, margin: float = 0.1) -> RegimeReport:
    """Check the smallness condition for the corrector expansion.

    The leading corrector dominates when ``eps*sigma << eta^(5/4)`` in 3D and
    ``eps*sigma^(3/2) << eta^(3/2)`` in 2D.  The report carries the ratio of
    the two sides and a flag ``ratio < margin``.
    """
    if d not in (2, 3):
        raise ValueError("d must be 2 or 3")
    if d == 3:
        ratio = s.eps * s.sigma / s.eta ** 1.25
    else:
        ratio = s.eps * s.sigma ** 1.5 / s.eta ** 1.5
    return RegimeReport(d=d, ratio=ratio, margin=margin, ok=ratio < margin)


# ---------------------------------------------------------------------------
# complex square root with the upper-half-plane branch
# ---------------------------------------------------------------------------

def principal_sqrt(a):
    """Principal square root: for a = u + iv,

        sqrt(a) = (sqrt(sqrt(u^2+v^2)+u) + i sgn(v) sqrt(sqrt(u^2+v^2)-u)) / sqrt(2)

    with sgn(0) := +1 so the branch cut sits on the negative real axis and the
    value at v = 0 is the limit from v -> 0+.  Guarantees Im(sqrt(a)) >= 0
    whenever Im(a) >= 0, which selects outgoing/decaying vertical modes.
    Accepts scalars or arrays.
    """
    a = np.asarray(a, dtype=np.complex128)
    u = a.real
    v = a.imag
    r = np.hypot(u, v)
    sgn = np.where(v < 0.0, -1.0, 1.0)
    # Evaluate whichever of r+u, r-u is free of cancellation and recover the
    # other component from re*im = v/2 (exact identity of the closed form).
    big = np.sqrt(0.5 * (r + np.abs(u)))
    with np.errstate(divide="ignore", invalid="ignore"):
        small = np.where(big > 0.0, np.abs(v) / (2.0 * np.where(big > 0, big, 1.0)), 0.0)
    re = np.where(u >= 0.0, big, small)
    im = sgn * np.where(u >= 0.0, small, big)
    out = re + 1j * im
    if out.ndim == 0:
        return complex(out)
    return out


# ---------------------------------------------------------------------------
# layered refractive profile
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerStack:
    """Three-region complex squared refractive profile.

    ``n0_sq`` applies for z > 0 (air), ``ne_sq`` in the slab -L < z <= 0,
    ``n2_sq`` for z <= -L (water).  All imaginary parts are positive (they
    include the artificial absorption).  ``kappa_m`` is the guaranteed lower
    bound on Im of the random coefficient inside the slab.
    """

    n0_sq: complex
    ne_sq: complex
    n2_sq: complex
    L: float
    kappa_m: float

    def __post_init__(self):
        for name in ("n0_sq", "ne_sq", "n2_sq"):
            val = getattr(self, name)
            if val.imag <= 0:
                raise ValueError(f"Im({name}) must be positive")
        if self.ne_sq.real < self.n0_sq.real:
            raise ValueError("Re(ne_sq) must not be below Re(n0_sq)")
        if self.n2_sq.real < self.n0_sq.real:
            raise ValueError("Re(n2_sq) must not be below Re(n0_sq)")
        if self.L <= 0:
            raise ValueError("L must be positive")
        if not (0.0 < self.kappa_m <= self.ne_sq.imag):
            raise ValueError("kappa_m must lie in (0, Im(ne_sq)]")

    def layer_of(self, z):
        """0 for air, 1 for slab, 2 for water (vectorized)."""
        z = np.asarray(z)
        out = np.where(z > 0.0, 0, np.where(z > -self.L, 1, 2))
        return out if out.ndim else int(out)

    def n_sq_at(self, z):
        """Piecewise squared index at height(s) z."""
        z = np.asarray(z, dtype=float)
        table = np.array([self.n0_sq, self.ne_sq, self.n2_sq])
        out = table[self.layer_of(z)]
        return out if out.ndim else complex(out)

    def replace_kappa_e(self, kappa_e: float, alpha: float) -> "LayerStack":
        """Stack with the slab absorption swapped for ``kappa_e`` (+alpha)."""
        return LayerStack(self.n0_sq, self.ne_sq.real + 1j * (kappa_e + alpha),
                          self.n2_sq, self.L, min(self.kappa_m, kappa_e + alpha))


# ---------------------------------------------------------------------------
# grid and field containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    """Uniform rectangular grid: origin, spacing and extents per axis."""

    origin: tuple
    spacing: tuple
    shape: tuple

    def __post_init__(self):
        if not (len(self.origin) == len(self.spacing) == len(self.shape)):
            raise ValueError("origin, spacing and shape must have equal length")
        if any(s <= 0 for s in self.spacing):
            raise ValueError("spacing must be positive on every axis")
        if any(n < 1 for n in self.shape):
            raise ValueError("extents must be >= 1")

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axis(self, i: int) -> np.ndarray:
        return self.origin[i] + self.spacing[i] * np.arange(self.shape[i])

    def meshgrid(self):
        return np.meshgrid(*(self.axis(i) for i in range(self.ndim)),
                           indexing="ij")

    def points(self) -> np.ndarray:
        """All grid points as an (size, ndim) array, row-major order."""
        mesh = self.meshgrid()
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def bounds(self):
        return tuple((self.origin[i], self.origin[i] + self.spacing[i] * (self.shape[i] - 1))
                     for i in range(self.ndim))


class ComplexField:
    """Complex samples on a uniform grid, row-major.  Read-only after init."""

    __slots__ = ("grid", "values")

    def __init__(self, grid: Grid, values: np.ndarray):
        values = np.ascontiguousarray(values, dtype=np.complex128)
        if values.shape != tuple(grid.shape):
            raise ValueError(
                f"value shape {values.shape} != grid extents {grid.shape}")
        values.flags.writeable = False
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    def __setattr__(self, name, value):
        raise AttributeError("ComplexField is immutable")

    def __reduce__(self):
        return (ComplexField, (self.grid, np.asarray(self.values)))

    @classmethod
    def zeros(cls, grid: Grid) -> "ComplexField":
        return cls(grid, np.zeros(grid.shape, dtype=np.complex128))

    def interp(self, points):
        """Multilinear interpolation at point(s) inside the grid.

        Accepts a single point (length-ndim sequence) or an (N, ndim) array;
        returns a complex scalar or an (N,) complex array accordingly.
        """
        g = self.grid
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != g.ndim:
            raise ValueError(f"points must have {g.ndim} coordinates")
        idx = np.empty(pts.shape, dtype=np.intp)
        frac = np.empty(pts.shape)
        for i in range(g.ndim):
            t = (pts[:, i] - g.origin[i]) / g.spacing[i]
            if np.any(t < -1e-9) or np.any(t > g.shape[i] - 1 + 1e-9):
                raise ValueError(f"point outside grid along axis {i}")
            if g.shape[i] > 1:
                j = np.clip(np.floor(t).astype(np.intp), 0, g.shape[i] - 2)
                idx[:, i] = j
                frac[:, i] = np.clip(t - j, 0.0, 1.0)
            else:
                idx[:, i] = 0
                frac[:, i] = 0.0
        val = np.zeros(len(pts), dtype=np.complex128)
        for corner in range(1 << g.ndim):
            w = np.ones(len(pts))
            sel = []
            for i in range(g.ndim):
                if (corner >> i) & 1:
                    if g.shape[i] == 1:
                        w[:] = 0.0
                    else:
                        w *= frac[:, i]
                    sel.append(np.minimum(idx[:, i] + 1, g.shape[i] - 1))
                else:
                    if g.shape[i] > 1:
                        w *= 1.0 - frac[:, i]
                    sel.append(idx[:, i])
            val += w * self.values[tuple(sel)]
        if np.asarray(points).ndim == 1:
            return complex(val[0])
        return val


# ---------------------------------------------------------------------------
# serialization: raw interleaved little-endian float64 + JSON sidecar
# ---------------------------------------------------------------------------

def _field_payload(field: ComplexField) -> bytes:
    inter = np.empty(field.values.size * 2, dtype="<f8")
    flat = field.values.ravel()
    inter[0::2] = flat.real
    inter[1::2] = flat.imag
    return inter.tobytes()


def save_field(field: ComplexField, path) -> Path:
    """Write ``path`` (binary payload) and ``path.json`` (grid descriptor).

    Payload is interleaved (re, im) little-endian 8-byte floats in row-major
    grid order; the sidecar carries the grid, endianness tag and a SHA-256
    checksum of the payload.  Round trip is bit exact.
    """
    path = Path(path)
    payload = _field_payload(field)
    path.write_bytes(payload)
    sidecar = {
        "format": "slabwave-complex-field-v1",
        "endianness": "little",
        "dtype": "float64-interleaved-re-im",
        "origin": list(field.grid.origin),
        "spacing": list(field.grid.spacing),
        "extents": list(field.grid.shape),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def load_field(path) -> ComplexField:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    if sidecar.get("endianness") != "little":
        raise ValueError("unsupported endianness tag")
    payload = path.read_bytes()
    digest = hashlib.sha256(payload).hexdigest()
    if digest != sidecar["sha256"]:
        raise ValueError(f"checksum mismatch for {path}")
    inter = np.frombuffer(payload, dtype="<f8")
    values = (inter[0::2] + 1j * inter[1::2]).reshape(sidecar["extents"])
    grid = Grid(origin=tuple(sidecar["origin"]),
                spacing=tuple(sidecar["spacing"]),
                shape=tuple(sidecar["extents"]))
    return ComplexField(grid, values)
