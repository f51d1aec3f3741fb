"""High-frequency radiative transport in the three-layer slab.

The backscattered intensity of the randomly perturbed slab is described, in
the high-frequency limit, by a stationary transport equation

    (mu(x) + p . grad_x) W(x, p) = S(x) delta(|p|^2 - k_e^2),

posed in the slab with specular reflection-transmission conditions at the
two interfaces z = 0 and z = -L.  The source S is isotropic on the momentum
shell |p| = k_e and proportional to |chi u|^2, the intensity of the
homogenized field inside the slab.

This module solves that equation by deterministic long characteristics:
every source cell emits one ray per direction-quadrature node, and each ray
splits at the interfaces into a reflected and a transmitted branch with the
classical flat-interface power coefficients

    R_j = ((k_e(xi) - k_j(xi)) / (k_e(xi) + k_j(xi)))^2,
    T_j = 4 k_e(xi)^2 / (k_e(xi) + k_j(xi))^2,

where k_j(xi) = sqrt(k_j^2 - |xi|^2) is the vertical wavenumber at
transverse frequency xi.  Transverse momentum is conserved at every event
(Snell-Descartes).  Directions steeper than the air critical angle
(|xi| >= k_0) reflect totally (R = 1).  The water wavenumber k_2 exceeds
k_e, so no total reflection occurs from below and every bottom event leaks
weight; together with the finite transverse bookkeeping window this makes
every ray tree finite.

There is no Monte-Carlo sampling anywhere: the branch tree is walked
exhaustively (up to explicit bounce/weight caps whose discarded remainder
is itemized), so conservation checks are exact accounting identities rather
than statistical estimates.

The phase-space density W is accumulated on a (x, z) window covering the
slab and the lower air region, discretized in direction by the same uniform
angle nodes used for emission.  From W the two-point correlation model

    C0(x, y) = u(x) conj(u(y))
               + beta^d Int e^{-i (x - y) . p / eta} W((x+y)/2, p) dp

is assembled by direction quadrature.  The overall source constant
pi (2 pi)^4 tau^2 / eta^(d+1) is carried symbolically (a single stored
multiplier) so that all conservation identities are normalization free.

Only d = 2 is implemented (uniform midpoint angle quadrature); all upstream
grid fields are two-dimensional.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ComplexField, Grid, LayerStack, Scales
from .medium import CovarianceModel

__all__ = [
    "TransportMedium", "PhaseSpaceRay", "Caps", "SourceSet", "WignerDensity",
    "DetectorFlux", "TransportTallies", "TransportResult", "FluxReport",
    "vertical_wavenumber", "rt_coefficients", "emit_source", "propagate",
    "flux_balance", "correlation_C0", "save_wigner", "load_wigner",
    "detector_flux_csv", "wigner_slice_csv",
]

_LAYER_KEYS = {0: 0, "0": 0, "air": 0, 1: 1, "e": 1, "slab": 1,
               2: 2, "2": 2, "water": 2}


# ---------------------------------------------------------------------------
# kinematic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransportMedium:
    """Real wavenumbers and absorption rates of the three regions.

    ``k0 <= ke <= k2`` are the effective (real) wavenumbers of air, slab and
    water (equalities model index-matched sanity configurations);
    ``mu0, mu_e, mu2 >= 0`` are the per-layer absorption rates
    entering the transport operator, so intensity decays like
    ``exp(-mu * s / |p|)`` over a path of length ``s``.
    """

    k0: float
    ke: float
    k2: float
    mu0: float
    mu_e: float
    mu2: float
    L: float

    def __post_init__(self):
        if not (0.0 < self.k0 <= self.ke <= self.k2):
            raise ValueError("wavenumbers must satisfy 0 < k0 <= ke <= k2")
        if min(self.mu0, self.mu_e, self.mu2) < 0.0:
            raise ValueError("absorption rates must be nonnegative")
        if self.L <= 0.0:
            raise ValueError("L must be positive")

    @classmethod
    def from_stack(cls, stack: LayerStack, k: float) -> "TransportMedium":
        """Transport parameters read off a squared-index profile.

        Wavenumbers are ``k * sqrt(Re n^2)``; the absorption rate is the
        intensity-decay rate of the underlying wave, ``k^2 * Im n^2`` (a
        plane wave ``exp(i k n z)`` loses intensity at rate
        ``2 k Im n ~= k^2 Im n^2 / (k Re n)`` per unit length, i.e. at rate
        ``mu / |p|`` with ``mu = k^2 Im n^2``).
        """
        return cls(k0=k * math.sqrt(stack.n0_sq.real),
                   ke=k * math.sqrt(stack.ne_sq.real),
                   k2=k * math.sqrt(stack.n2_sq.real),
                   mu0=k ** 2 * stack.n0_sq.imag,
                   mu_e=k ** 2 * stack.ne_sq.imag,
                   mu2=k ** 2 * stack.n2_sq.imag,
                   L=stack.L)

    def wavenumber(self, layer) -> float:
        return (self.k0, self.ke, self.k2)[_LAYER_KEYS[layer]]

    def absorption(self, layer) -> float:
        return (self.mu0, self.mu_e, self.mu2)[_LAYER_KEYS[layer]]


def vertical_wavenumber(med: TransportMedium, layer, k_perp):
    """Vertical wavenumber ``sqrt(k_j^2 - k_perp^2)`` of a layer.

    For air (layer 0) the evanescent range ``k_perp > k0`` maps to 0 (no
    propagating transmitted direction exists there).  For the slab and the
    water layer the argument never exceeds ``k_j`` for momenta emitted on
    the slab shell, but the same clamp is applied for safety.
    """
    k_perp = np.asarray(k_perp, dtype=float)
    if np.any(k_perp < 0.0):
        raise ValueError("k_perp must be nonnegative")
    kj = med.wavenumber(layer)
    out = np.sqrt(np.maximum(kj ** 2 - k_perp ** 2, 0.0))
    return out if out.ndim else float(out)


def rt_coefficients(med: TransportMedium, interface: str, k_perp):
    """Power reflection/transmission coefficients at an interface.

    ``interface`` is ``"top"`` (slab/air, z = 0) or ``"bottom"``
    (slab/water, z = -L).  The incoming ray lives in the slab; with
    ``ke_z = sqrt(ke^2 - k_perp^2)`` and ``kj_z`` the vertical wavenumber on
    the far side,

        R = ((ke_z - kj_z) / (ke_z + kj_z))^2,   T = 4 ke_z^2 / (ke_z + kj_z)^2,

    which satisfy the flux identity ``R + (kj_z / ke_z) T = 1``.  Top events
    at or beyond the critical angle (``k_perp >= k0``) reflect totally:
    R = 1, T = 0.
    """
    k_perp = np.asarray(k_perp, dtype=float)
    if np.any(k_perp < 0.0):
        raise ValueError("k_perp must be nonnegative")
    if interface not in ("top", "bottom"):
        raise ValueError("interface must be 'top' or 'bottom'")
    ke_z = vertical_wavenumber(med, "e", k_perp)
    kj_z = vertical_wavenumber(med, "air" if interface == "top" else "water",
                               k_perp)
    denom = ke_z + kj_z
    safe = denom > 0.0
    denom = np.where(safe, denom, 1.0)
    R = np.where(safe, ((ke_z - kj_z) / denom) ** 2, 1.0)
    T = np.where(safe, 4.0 * ke_z ** 2 / denom ** 2, 0.0)
    if interface == "top":
        tir = np.asarray(k_perp >= med.k0)
        R = np.where(tir, 1.0, R)
        T = np.where(tir, 0.0, T)
    if R.ndim:
        return R, T
    return float(R), float(T)


@dataclass(frozen=True)
class PhaseSpaceRay:
    """A single transport characteristic: position, momentum, weight.

    ``p`` lies on the shell of whichever layer contains ``x``; ``weight`` is
    a nonnegative intensity that only ever decreases (absorption and branch
    coefficients are in [0, 1]); ``bounces`` counts interface events.
    """

    x: tuple
    p: tuple
    weight: float
    bounces: int = 0

    def __post_init__(self):
        if self.weight < 0.0:
            raise ValueError("weight must be nonnegative")
        if self.bounces < 0:
            raise ValueError("bounces must be nonnegative")
        if math.hypot(*self.p) == 0.0:
            raise ValueError("momentum must be nonzero")

    @property
    def k_perp(self) -> float:
        return abs(self.p[0])


@dataclass(frozen=True)
class Caps:
    """Branch-tree termination caps; discarded weight is itemized."""

    max_bounces: int = 80
    min_weight: float = 1e-13

    def __post_init__(self):
        if self.max_bounces < 1:
            raise ValueError("max_bounces must be at least 1")
        if self.min_weight < 0.0:
            raise ValueError("min_weight must be nonnegative")


# ---------------------------------------------------------------------------
# source emission
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SourceSet:
    """Isotropic shell source: cell positions, cell powers, angle nodes.

    Each cell at ``(x[i], z[i])`` carries ``cell_weight[i] = |u|^2 * vol``
    (aggregated over the fine grid) and radiates into every angle node with
    per-direction weight ``cell_weight * angle_weight / 2``; the factor 1/2
    is the shell Jacobian ``1/(2 ke)`` combined with the shell measure
    ``ke d(theta)``.  The absolute source constant
    ``pi (2 pi)^4 tau^2 / eta^(d+1)`` multiplies everything and is stored
    symbolically in ``constant``.
    """

    x: np.ndarray
    z: np.ndarray
    cell_weight: np.ndarray
    angles: np.ndarray
    constant: float
    ke: float
    eta: float
    beta: float
    dropped: float = 0.0

    @property
    def n_cells(self) -> int:
        return int(self.x.size)

    @property
    def n_angles(self) -> int:
        return int(self.angles.size)

    @property
    def angle_weight(self) -> float:
        return 2.0 * math.pi / self.n_angles

    def emitted_power(self) -> float:
        """Total emitted power in units of the symbolic constant.

        Per cell: sum over angles of ``cell_weight * d(theta) / 2`` equals
        ``pi * cell_weight`` exactly.
        """
        return math.pi * float(np.sum(self.cell_weight))


def emit_source(u: ComplexField, med: TransportMedium, scales: Scales,
                cov: CovarianceModel, *, n_angles: int = 64,
                max_cells: int = 4096) -> SourceSet:
    """Build the isotropic shell source ``S ~ |chi u|^2`` from a wavefield.

    ``u`` must be a 2-D field whose grid covers the full slab depth
    ``(-L, 0)``; only slab nodes contribute (the indicator chi).  The fine
    grid is aggregated onto at most ``max_cells`` source cells by integer
    block averaging that preserves the total power ``sum |u|^2 * vol``
    exactly.  ``n_angles`` must be even so that no quadrature node is
    exactly horizontal.
    """
    if u.grid.ndim != 2:
        raise ValueError("emit_source requires a 2-D field")
    if n_angles < 4 or n_angles % 2:
        raise ValueError("n_angles must be even and at least 4")
    zs = u.grid.axis(1)
    if zs.min() > -med.L or zs.max() < 0.0:
        raise ValueError("field grid does not cover the slab depth range")

    power = np.abs(u.values) ** 2 * u.grid.cell_volume
    in_slab = (zs > -med.L) & (zs <= 0.0)
    power[:, ~in_slab] = 0.0

    xs = u.grid.axis(0)
    nx, nz = power.shape
    # block-aggregate to keep the ray-tree count bounded
    factor = 1
    while (math.ceil(nx / factor) * math.ceil(nz / factor)) > max_cells:
        factor += 1
    bx, bz = math.ceil(nx / factor), math.ceil(nz / factor)
    cw = np.zeros((bx, bz))
    cx = np.zeros((bx, bz))
    cz = np.zeros((bx, bz))
    for i in range(bx):
        si = slice(i * factor, min((i + 1) * factor, nx))
        for j in range(bz):
            sj = slice(j * factor, min((j + 1) * factor, nz))
            block = power[si, sj]
            w = block.sum()
            cw[i, j] = w
            if w > 0.0:
                cx[i, j] = np.sum(block.sum(axis=1) * xs[si]) / w
                cz[i, j] = np.sum(block.sum(axis=0) * zs[sj]) / w
    keep = cw.ravel() > 0.0
    d = 2
    constant = math.pi * (2.0 * math.pi) ** 4 * cov.tau_sq / scales.eta ** (d + 1)
    angles = (np.arange(n_angles) + 0.5) * (2.0 * math.pi / n_angles)
    return SourceSet(x=cx.ravel()[keep], z=cz.ravel()[keep],
                     cell_weight=cw.ravel()[keep], angles=angles,
                     constant=constant, ke=med.ke, eta=scales.eta,
                     beta=scales.beta)


# ---------------------------------------------------------------------------
# phase-space density and tallies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WignerDensity:
    """Shell density W on an (x, z) window times direction nodes.

    ``values[ix, iz, ia] >= 0`` is the angular density at the cell centre
    ``grid.points`` and angle node ``angles[ia]``, normalized so that
    ``Int f(p) W(x, p) dp ~= constant * sum_a values[..., a] * f(p_a) *
    angle_weight`` with ``p_a`` on the shell of the layer containing the
    point.  ``constant`` is the symbolic source normalization.
    """

    grid: Grid
    angles: np.ndarray
    values: np.ndarray
    med: TransportMedium
    eta: float
    beta: float
    constant: float

    @property
    def angle_weight(self) -> float:
        return 2.0 * math.pi / self.angles.size

    def angular_integral(self) -> np.ndarray:
        """``Int W(x, p) dp`` per spatial cell, in units of ``constant``."""
        return self.values.sum(axis=2) * self.angle_weight

    def at(self, point) -> np.ndarray:
        """Angular vector of W at the spatial cell containing ``point``."""
        ix, iz = self._cell_index(point)
        return self.values[ix, iz]

    def _cell_index(self, point):
        ox, oz = self.grid.origin
        dx, dz = self.grid.spacing
        ix = int(math.floor((point[0] - ox) / dx + 0.5))
        iz = int(math.floor((point[1] - oz) / dz + 0.5))
        nx, nz = self.grid.shape
        if not (0 <= ix < nx and 0 <= iz < nz):
            raise ValueError("point lies outside the phase-space window")
        return ix, iz


@dataclass(frozen=True)
class DetectorFlux:
    """Upward flux through the plane z = z_d, binned in (x, direction)."""

    z_d: float
    x_edges: np.ndarray
    angles: np.ndarray
    values: np.ndarray
    missed: float = 0.0

    def total(self) -> float:
        return float(self.values.sum())


@dataclass(frozen=True)
class TransportTallies:
    """Itemized energy accounting of one propagate() run."""

    emitted: float = 0.0
    absorbed_slab: float = 0.0
    escaped_top: float = 0.0
    escaped_bottom: float = 0.0
    escaped_side: float = 0.0
    capped: float = 0.0
    dropped: float = 0.0
    n_rays: int = 0
    n_dropped: int = 0

    def _vector(self) -> np.ndarray:
        return np.array([self.emitted, self.absorbed_slab, self.escaped_top,
                         self.escaped_bottom, self.escaped_side, self.capped,
                         self.dropped, float(self.n_rays),
                         float(self.n_dropped)])

    @classmethod
    def _from_vector(cls, v) -> "TransportTallies":
        return cls(emitted=float(v[0]), absorbed_slab=float(v[1]),
                   escaped_top=float(v[2]), escaped_bottom=float(v[3]),
                   escaped_side=float(v[4]), capped=float(v[5]),
                   dropped=float(v[6]), n_rays=int(v[7]), n_dropped=int(v[8]))


@dataclass(frozen=True)
class TransportResult:
    wigner: WignerDensity
    detector: DetectorFlux
    tallies: TransportTallies


@dataclass(frozen=True)
class FluxReport:
    """Conservation audit: emitted = absorbed + escaped + capped + dropped."""

    emitted: float
    absorbed: float
    escaped: float
    capped: float
    dropped: float
    imbalance: float
    items: dict = field(default_factory=dict)


def flux_balance(result) -> FluxReport:
    """Audit the accounting identity of a transport run.

    Accepts a :class:`TransportResult` or :class:`TransportTallies`.  The
    relative imbalance is |emitted - booked| / emitted (0 for an empty run).
    """
    t = result.tallies if isinstance(result, TransportResult) else result
    escaped = t.escaped_top + t.escaped_bottom + t.escaped_side
    booked = t.absorbed_slab + escaped + t.capped + t.dropped
    imbalance = abs(t.emitted - booked) / t.emitted if t.emitted > 0 else 0.0
    return FluxReport(emitted=t.emitted, absorbed=t.absorbed_slab,
                      escaped=escaped, capped=t.capped, dropped=t.dropped,
                      imbalance=imbalance,
                      items={"escaped_top": t.escaped_top,
                             "escaped_bottom": t.escaped_bottom,
                             "escaped_side": t.escaped_side,
                             "n_rays": t.n_rays,
                             "n_dropped": t.n_dropped})


# ---------------------------------------------------------------------------
# the long-characteristics engine
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _EngineSpec:
    """Static propagate() parameters shared by all worker tasks."""

    med: TransportMedium
    angles: tuple
    caps: Caps
    detector_z: float
    x_window: tuple
    w_origin: tuple
    w_spacing: tuple
    w_shape: tuple
    n_x_bins: int
    deposit_step: float
    deposit: bool


def _angle_bin(px, pz, n_angles):
    theta = np.mod(np.arctan2(pz, px), 2.0 * math.pi)
    idx = np.floor(theta / (2.0 * math.pi / n_angles)).astype(int)
    return np.clip(idx, 0, n_angles - 1)


def _deposit_segments(W, spec, x0, z0, px, pz, w0, s_len, p_mag, mu):
    """Track-sampling deposit of attenuated weight along straight segments.

    Each segment is subdivided into equal steps no longer than
    ``spec.deposit_step``; the midpoint value ``w(s) ds / (|p| * cell area *
    d(theta))`` is added to the phase-space cell containing the sample.
    """
    if W is None or x0.size == 0:
        return
    nx, nz, na = spec.w_shape
    ds = spec.deposit_step
    n_i = np.maximum(1, np.ceil(s_len / ds)).astype(int)
    idx = np.repeat(np.arange(x0.size), n_i)
    ds_seg = (s_len / n_i)[idx]
    offsets = np.repeat(np.cumsum(n_i) - n_i, n_i)
    s_mid = (np.arange(idx.size) - offsets + 0.5) * ds_seg
    cosd = (px / p_mag)[idx]
    sind = (pz / p_mag)[idx]
    xs = x0[idx] + s_mid * cosd
    zs = z0[idx] + s_mid * sind
    dtheta = 2.0 * math.pi / na
    cell_area = spec.w_spacing[0] * spec.w_spacing[1]
    vals = (w0[idx] * np.exp(-(mu / p_mag) * s_mid) * ds_seg
            / (p_mag * cell_area * dtheta))
    ix = np.floor((xs - spec.w_origin[0]) / spec.w_spacing[0] + 0.5).astype(int)
    iz = np.floor((zs - spec.w_origin[1]) / spec.w_spacing[1] + 0.5).astype(int)
    ia = _angle_bin(px, pz, na)[idx]
    ok = (ix >= 0) & (ix < nx) & (iz >= 0) & (iz < nz)
    np.add.at(W, (ix[ok], iz[ok], ia[ok]), vals[ok])


def _trace_chunk(args):
    """Walk the full branch trees of one chunk of source cells.

    Pure function of its arguments; accumulation order inside a chunk is
    fixed, so results are bitwise reproducible and independent of how chunks
    are distributed over workers.
    """
    spec, cx, cz, cweight, dtheta = args
    med = spec.med
    angles = np.asarray(spec.angles)
    na = angles.size
    W = np.zeros(spec.w_shape) if spec.deposit else None
    det = np.zeros((spec.n_x_bins, na))
    xlo, xhi = spec.x_window
    det_lo, det_hi = xlo, xhi
    det_dx = (det_hi - det_lo) / spec.n_x_bins
    det_missed = 0.0
    tall = np.zeros(9)

    # initial batch: every cell radiates into every angle node
    x = np.repeat(cx, na)
    z = np.repeat(cz, na)
    th = np.tile(angles, cx.size)
    px = med.ke * np.cos(th)
    pz = med.ke * np.sin(th)
    w = np.repeat(cweight, na) * (dtheta / 2.0)
    bounces = np.zeros(x.size, dtype=int)
    tall[0] += w.sum()
    tall[7] += x.size

    degenerate = pz == 0.0
    if np.any(degenerate):
        tall[6] += w[degenerate].sum()
        tall[8] += int(degenerate.sum())
        keep = ~degenerate
        x, z, px, pz, w, bounces = (a[keep] for a in (x, z, px, pz, w, bounces))

    while x.size:
        up = pz > 0.0
        z_target = np.where(up, 0.0, -med.L)
        s_z = (z_target - z) * med.ke / pz
        with np.errstate(divide="ignore"):
            s_x = np.where(px > 0.0, (xhi - x) * med.ke / px,
                           np.where(px < 0.0, (xlo - x) * med.ke / px, np.inf))
        s = np.minimum(s_z, s_x)
        _deposit_segments(W, spec, x, z, px, pz, w, s, med.ke, med.mu_e)
        w_end = w * np.exp(-med.mu_e * s / med.ke)
        tall[1] += (w - w_end).sum()

        lateral = s_x < s_z
        tall[4] += w_end[lateral].sum()
        keep = ~lateral
        x = x[keep] + s[keep] * px[keep] / med.ke
        z = z_target[keep]
        px, pz, w, bounces = px[keep], pz[keep], w_end[keep], bounces[keep]
        up = pz > 0.0

        k_perp = np.abs(px)
        ke_z = vertical_wavenumber(med, "e", k_perp)
        ke_z = np.atleast_1d(ke_z)
        # top interface: reflected branch stays, transmitted enters the air.
        # T transmits the phase-space density (it may exceed 1); the energy
        # carried across is w * T * (k0_z / ke_z), which is what the flux
        # identity R + (k0_z/ke_z) T = 1 conserves.
        if np.any(up):
            Rt, Tt = rt_coefficients(med, "top", k_perp[up])
            Rt, Tt = np.atleast_1d(Rt), np.atleast_1d(Tt)
            pza = np.atleast_1d(vertical_wavenumber(med, "air", k_perp[up]))
            wt = w[up] * Tt            # density weight (deposits)
            we = wt * pza / ke_z[up]   # energy weight (ledger, detector)
            tall[2] += we.sum()
            open_ch = Tt > 0.0
            if np.any(open_ch):
                xa = x[up][open_ch]
                pxa = px[up][open_ch]
                pza = pza[open_ch]
                # air leg: deposit inside the window, then tally the detector
                z_top = (spec.w_origin[1]
                         + spec.w_shape[1] * spec.w_spacing[1])
                s_exit = np.minimum(
                    np.maximum(z_top, 0.0) * med.k0 / pza,
                    np.where(pxa > 0.0, (xhi - xa) * med.k0 / pxa,
                             np.where(pxa < 0.0, (xlo - xa) * med.k0 / pxa,
                                      np.inf)))
                _deposit_segments(W, spec, xa, np.zeros_like(xa), pxa, pza,
                                  wt[open_ch], s_exit, med.k0, med.mu0)
                s_det = spec.detector_z * med.k0 / pza
                x_det = xa + spec.detector_z * pxa / pza
                w_det = we[open_ch] * np.exp(-med.mu0 * s_det / med.k0)
                ib = np.floor((x_det - det_lo) / det_dx).astype(int)
                ok = (ib >= 0) & (ib < spec.n_x_bins)
                np.add.at(det, (ib[ok], _angle_bin(pxa, pza, na)[ok]),
                          w_det[ok])
                det_missed += w_det[~ok].sum()
        # bottom interface: transmitted energy leaves into the water
        if np.any(~up):
            Rb, Tb = rt_coefficients(med, "bottom", k_perp[~up])
            Rb, Tb = np.atleast_1d(Rb), np.atleast_1d(Tb)
            k2_z = np.atleast_1d(
                vertical_wavenumber(med, "water", k_perp[~up]))
            tall[3] += (w[~up] * Tb * k2_z / ke_z[~up]).sum()

        # the surviving branch is the specular reflection at either face
        R = np.empty(x.size)
        if np.any(up):
            R[up] = np.atleast_1d(rt_coefficients(med, "top", k_perp[up])[0])
        if np.any(~up):
            R[~up] = np.atleast_1d(
                rt_coefficients(med, "bottom", k_perp[~up])[0])
        w = w * R
        pz = -pz
        bounces = bounces + 1

        over = bounces >= spec.caps.max_bounces
        faint = w < spec.caps.min_weight
        cut = over | faint
        tall[5] += w[cut].sum()
        keep = ~cut
        x, z, px, pz, w, bounces = (a[keep]
                                    for a in (x, z, px, pz, w, bounces))

    return W, det, tall, det_missed


def propagate(source: SourceSet, med: TransportMedium, *, detector_z: float,
              x_window: tuple, caps: Caps = Caps(),
              wigner_shape: tuple = (64, 48), wigner_z=None,
              n_x_bins: int = 64, deposit_step: float = None,
              deposit: bool = True, chunk_cells: int = 32,
              n_jobs: int = 1) -> TransportResult:
    """Propagate the source through the slab and accumulate W and the flux.

    Each source cell's branch tree is walked exhaustively: straight flights
    with attenuation ``exp(-mu s / |p|)``, specular splitting at both
    interfaces, transverse momentum conserved throughout.  Transmitted
    weight is booked as escaped at the interface crossing; weight leaving
    the transverse window ``x_window`` is booked as side escape; bounce and
    weight caps book their discarded remainder.  The upward flux through the
    plane ``z = detector_z > 0`` is binned over ``x_window`` and the source
    angle nodes.

    Work is partitioned into fixed chunks of ``chunk_cells`` source cells
    and reduced in chunk order, so the result is bitwise identical for any
    ``n_jobs``.
    """
    if detector_z <= 0.0:
        raise ValueError("detector plane must lie in the air, z_d > 0")
    if x_window[0] >= x_window[1]:
        raise ValueError("x_window must be an increasing interval")
    if abs(med.ke - source.ke) > 1e-12 * med.ke:
        raise ValueError("source was emitted on a different shell")
    if wigner_z is None:
        wigner_z = (-med.L, min(detector_z, 0.25 * med.L))
    nx, nz = wigner_shape
    dx = (x_window[1] - x_window[0]) / nx
    dz = (wigner_z[1] - wigner_z[0]) / nz
    w_grid = Grid(origin=(x_window[0] + dx / 2.0, wigner_z[0] + dz / 2.0),
                  spacing=(dx, dz), shape=(nx, nz))
    if deposit_step is None:
        deposit_step = 0.5 * min(dx, dz)
    spec = _EngineSpec(med=med, angles=tuple(source.angles), caps=caps,
                       detector_z=detector_z, x_window=tuple(x_window),
                       w_origin=w_grid.origin, w_spacing=w_grid.spacing,
                       w_shape=(nx, nz, source.n_angles), n_x_bins=n_x_bins,
                       deposit_step=float(deposit_step), deposit=deposit)

    chunks = []
    for lo in range(0, source.n_cells, chunk_cells):
        sl = slice(lo, min(lo + chunk_cells, source.n_cells))
        chunks.append((spec, source.x[sl], source.z[sl],
                       source.cell_weight[sl], source.angle_weight))

    W_total = np.zeros(spec.w_shape)
    det_total = np.zeros((n_x_bins, source.n_angles))
    tall_total = np.zeros(9)
    missed_total = 0.0
    if n_jobs > 1 and len(chunks) > 1:
        import multiprocessing
        # "spawn" avoids fork-after-threads deadlocks with threaded BLAS
        ctx = multiprocessing.get_context("spawn")
        with ctx.Pool(processes=n_jobs) as pool:
            results = pool.imap(_trace_chunk, chunks)
            for W, det, tall, missed in results:
                if W is not None:
                    W_total += W
                det_total += det
                tall_total += tall
                missed_total += missed
    else:
        for chunk in chunks:
            W, det, tall, missed = _trace_chunk(chunk)
            if W is not None:
                W_total += W
            det_total += det
            tall_total += tall
            missed_total += missed
    tall_total[6] += source.dropped

    wig = WignerDensity(grid=w_grid, angles=np.asarray(source.angles),
                        values=W_total, med=med, eta=source.eta,
                        beta=source.beta, constant=source.constant)
    edges = np.linspace(x_window[0], x_window[1], n_x_bins + 1)
    detector = DetectorFlux(z_d=detector_z, x_edges=edges,
                            angles=np.asarray(source.angles),
                            values=det_total, missed=missed_total)
    return TransportResult(wigner=wig, detector=detector,
                           tallies=TransportTallies._from_vector(tall_total))


# ---------------------------------------------------------------------------
# correlation model
# ---------------------------------------------------------------------------

def correlation_C0(x, y, u: ComplexField, W: WignerDensity,
                   scales: Scales) -> complex:
    """Two-point correlation of the backscattered field.

        C0(x, y) = u(x) conj(u(y))
                   + beta^d Int e^{-i (x - y) . p / eta} W((x+y)/2, p) dp

    The momentum integral is evaluated by the direction quadrature of W at
    the spatial cell containing the midpoint, with ``|p|`` the shell radius
    of the layer containing the midpoint and the stored source constant
    multiplied back in.  Hermitian symmetry C0(x, y) = conj(C0(y, x)) holds
    to rounding because W is real.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    mid = 0.5 * (x + y)
    vals = W.at(mid)  # raises if the midpoint leaves the window
    layer = ("air", "slab", "water")[_LAYER_KEYS[
        0 if mid[1] > 0.0 else (1 if mid[1] > -W.med.L else 2)]]
    p_mag = W.med.wavenumber(layer)
    dxy = x - y
    phase = np.exp(-1j * (p_mag / scales.eta)
                   * (dxy[0] * np.cos(W.angles) + dxy[1] * np.sin(W.angles)))
    integral = W.constant * W.angle_weight * np.sum(vals * phase)
    d = 2
    ux = complex(np.asarray(u.interp(x.reshape(1, 2))).ravel()[0])
    uy = complex(np.asarray(u.interp(y.reshape(1, 2))).ravel()[0])
    return ux * np.conj(uy) + scales.beta ** d * integral


# ---------------------------------------------------------------------------
# serialization and CSV emitters
# ---------------------------------------------------------------------------

def save_wigner(W: WignerDensity, path) -> Path:
    """Write ``path`` (float64 payload) and ``path.json`` (descriptor)."""
    path = Path(path)
    payload = np.ascontiguousarray(W.values, dtype="<f8").tobytes()
    path.write_bytes(payload)
    m = W.med
    sidecar = {
        "format": "slabwave-wigner-v1",
        "endianness": "little",
        "dtype": "float64",
        "origin": list(W.grid.origin),
        "spacing": list(W.grid.spacing),
        "extents": list(W.values.shape),
        "angles": list(np.asarray(W.angles)),
        "medium": {"k0": m.k0, "ke": m.ke, "k2": m.k2, "mu0": m.mu0,
                   "mu_e": m.mu_e, "mu2": m.mu2, "L": m.L},
        "eta": W.eta,
        "beta": W.beta,
        "constant": W.constant,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def load_wigner(path) -> WignerDensity:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    if sidecar.get("format") != "slabwave-wigner-v1":
        raise ValueError("unrecognized phase-space density descriptor")
    payload = path.read_bytes()
    if hashlib.sha256(payload).hexdigest() != sidecar["sha256"]:
        raise ValueError(f"checksum mismatch for {path}")
    shape = tuple(sidecar["extents"])
    values = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    m = sidecar["medium"]
    med = TransportMedium(k0=m["k0"], ke=m["ke"], k2=m["k2"], mu0=m["mu0"],
                          mu_e=m["mu_e"], mu2=m["mu2"], L=m["L"])
    grid = Grid(origin=tuple(sidecar["origin"]),
                spacing=tuple(sidecar["spacing"]), shape=shape[:2])
    return WignerDensity(grid=grid, angles=np.array(sidecar["angles"]),
                         values=values, med=med, eta=sidecar["eta"],
                         beta=sidecar["beta"], constant=sidecar["constant"])


def detector_flux_csv(det: DetectorFlux, path) -> Path:
    """Emit the detector flux map as rows (x_center, angle, value)."""
    path = Path(path)
    centers = 0.5 * (det.x_edges[:-1] + det.x_edges[1:])
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["x", "angle", "flux"])
        for i, xc in enumerate(centers):
            for j, ang in enumerate(det.angles):
                writer.writerow([repr(float(xc)), repr(float(ang)),
                                 repr(float(det.values[i, j]))])
    return path


def wigner_slice_csv(W: WignerDensity, z: float, path) -> Path:
    """Emit the W slice nearest to height ``z`` as (x, angle, value) rows."""
    path = Path(path)
    oz, dz = W.grid.origin[1], W.grid.spacing[1]
    iz = int(np.clip(round((z - oz) / dz), 0, W.grid.shape[1] - 1))
    xs = W.grid.axis(0)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["x", "angle", "w"])
        for i, xc in enumerate(xs):
            for j, ang in enumerate(W.angles):
                writer.writerow([repr(float(xc)), repr(float(ang)),
                                 repr(float(W.values[i, iz, j]))])
    return path
