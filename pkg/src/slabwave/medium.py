"""Poisson-inclusion random media and their covariance statistics.

The fluctuating coefficient is a shot-noise field

    W(y) = sum_i tau_i h((y - y_i) / R_i),        h = indicator of the unit ball,

with centers a Poisson point process of rate ``intensity`` per unit volume in
the *field* coordinates y.  The rescaled medium evaluated in slab coordinates
is ``V(x) = W(x / beta)``: centers and radii are stored rescaled (multiplied
by ``beta``) and the effective center rate is ``intensity * beta**-d``.  All
one-point moments are invariant under this rescaling; the integrated
covariances (sigma_r^2, sigma_i^2, gamma) are taken in field coordinates.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "AspectSpec",
    "InclusionSpec",
    "MediumRealization",
    "CovarianceModel",
    "sample_realization",
    "eval_V",
    "eval_q",
    "moments",
    "empirical_covariance",
    "lattice_covariance",
    "covariance_model_from_lattice",
    "analytic_covariance_model",
    "matrix_sqrt",
    "save_realization",
    "load_realization",
]

_BALL_VOL = {2: math.pi, 3: 4.0 * math.pi / 3.0}


@dataclass(frozen=True)
class AspectSpec:
    """Ellipsoidal inclusions: short/long axis ratio < 1, random orientation."""

    ratio: float
    random_rotation: bool = True

    def __post_init__(self):
        if not (0.0 < self.ratio < 1.0):
            raise ValueError("aspect ratio must lie in (0, 1)")


@dataclass(frozen=True)
class InclusionSpec:
    """Laws of the Poisson inclusion model.

    ``intensity`` is the Poisson rate per unit volume in field coordinates;
    radii are uniform on ``radius_range`` (field scale, rescaled by ``beta``
    when a realization is sampled); contrasts are uniform on the complex
    rectangle ``contrast_re_range x contrast_im_range``.
    """

    intensity: float
    radius_range: tuple = (0.5, 1.0)
    contrast_re_range: tuple = (0.05, 0.15)
    contrast_im_range: tuple = (0.0, 0.02)
    beta: float = 1.0
    d: int = 2
    aspect: Optional[AspectSpec] = None
    cap_sigmas: float = 8.0

    def __post_init__(self):
        rm, rM = self.radius_range
        if not (0.0 < rm <= rM):
            raise ValueError("need 0 < R_m <= R_M")
        if self.contrast_re_range[0] <= 0:
            raise ValueError("Re(tau) lower bound must be positive")
        if self.contrast_im_range[0] < 0:
            raise ValueError("Im(tau) lower bound must be nonnegative")
        if self.intensity < 0:
            raise ValueError("intensity must be nonnegative")
        if self.d not in (2, 3):
            raise ValueError("d must be 2 or 3")
        if not (0.0 < self.beta <= 1.0):
            raise ValueError("beta must lie in (0, 1]")

    def with_beta(self, beta: float) -> "InclusionSpec":
        return InclusionSpec(self.intensity, self.radius_range,
                             self.contrast_re_range, self.contrast_im_range,
                             beta, self.d, self.aspect, self.cap_sigmas)


def _uniform_moments(lo, hi):
    mean = 0.5 * (lo + hi)
    second = (lo * lo + lo * hi + hi * hi) / 3.0
    return mean, second


def _radius_power_moment(spec: InclusionSpec, p: int) -> float:
    a, b = spec.radius_range
    if a == b:
        return a ** p
    return (b ** (p + 1) - a ** (p + 1)) / ((p + 1) * (b - a))


def _shape_factor(spec: InclusionSpec) -> float:
    f = _BALL_VOL[spec.d]
    if spec.aspect is not None:
        f *= spec.aspect.ratio ** (spec.d - 1)
    return f


def moments(spec: InclusionSpec):
    """Closed-form one-point moments of the shot-noise field.

    Returns (mean, variance): mean = lambda * E[tau] * E[vol],
    variance = lambda * E[|tau|^2] * E[vol].
    """
    re_mean, re_sq = _uniform_moments(*spec.contrast_re_range)
    im_mean, im_sq = _uniform_moments(*spec.contrast_im_range)
    vol_mean = _shape_factor(spec) * _radius_power_moment(spec, spec.d)
    mean = spec.intensity * (re_mean + 1j * im_mean) * vol_mean
    var = spec.intensity * (re_sq + im_sq) * vol_mean
    return mean, var


@dataclass(frozen=True)
class MediumRealization:
    """One sample of the inclusion field, stored in rescaled coordinates."""

    spec: InclusionSpec
    seed: int
    box: tuple                      # evaluation box: ((lo, hi), ...) per axis
    centers: np.ndarray             # (N, d), inside the padded generation box
    radii: np.ndarray               # (N,), already multiplied by beta
    contrasts: np.ndarray           # (N,) complex
    rotations: Optional[np.ndarray]  # (N,) angles (d=2) or (N,3,3) (d=3)
    mean: complex
    sigma: float
    tree: cKDTree = field(repr=False, compare=False, default=None)

    @property
    def pad(self) -> float:
        return self.spec.beta * self.spec.radius_range[1]

    @property
    def max_radius(self) -> float:
        return float(self.radii.max()) if self.radii.size else 0.0


def _box_volume(box) -> float:
    vol = 1.0
    for lo, hi in box:
        if not (hi > lo):
            raise ValueError("box must have positive extent on every axis")
        vol *= hi - lo
    return vol


def _random_rotation(rng, d, n):
    if d == 2:
        return rng.uniform(0.0, math.pi, size=n)
    # d == 3: uniform rotations via QR of Gaussian matrices
    mats = np.empty((n, 3, 3))
    for i in range(n):
        q, r = np.linalg.qr(rng.standard_normal((3, 3)))
        q *= np.sign(np.diag(r))
        if np.linalg.det(q) < 0:
            q[:, 0] = -q[:, 0]
        mats[i] = q
    return mats


def sample_realization(spec: InclusionSpec, box, seed: int) -> MediumRealization:
    """Sample one medium over the (rescaled, bounded) evaluation ``box``.

    The generation region is padded by ``beta * R_M`` on every side so no
    inclusion overlapping the box is missed.  Deterministic given the seed.
    """
    box = tuple((float(lo), float(hi)) for lo, hi in box)
    if len(box) != spec.d:
        raise ValueError(f"box dimension {len(box)} != spec dimension {spec.d}")
    for lo, hi in box:
        if not (np.isfinite(lo) and np.isfinite(hi) and hi > lo):
            raise ValueError("box must be bounded with positive extent")
    pad = spec.beta * spec.radius_range[1]
    gen_box = tuple((lo - pad, hi + pad) for lo, hi in box)
    rate = spec.intensity * spec.beta ** (-spec.d)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1)]))
    n = rng.poisson(rate * _box_volume(gen_box))
    lows = np.array([lo for lo, _ in gen_box])
    highs = np.array([hi for _, hi in gen_box])
    centers = rng.uniform(lows, highs, size=(n, spec.d))
    radii = spec.beta * rng.uniform(*spec.radius_range, size=n)
    re = rng.uniform(*spec.contrast_re_range, size=n)
    im = rng.uniform(*spec.contrast_im_range, size=n)
    rotations = None
    if spec.aspect is not None and spec.aspect.random_rotation:
        rotations = _random_rotation(rng, spec.d, n)
    mean, var = moments(spec)
    tree = cKDTree(centers) if n else None
    return MediumRealization(spec=spec, seed=int(seed), box=box,
                             centers=centers, radii=radii,
                             contrasts=re + 1j * im, rotations=rotations,
                             mean=mean, sigma=math.sqrt(var), tree=tree)


def _inside_support(r: MediumRealization, points: np.ndarray, idx, pt_row):
    """Membership of point ``pt_row`` in inclusion(s) ``idx``."""
    spec = r.spec
    diff = points[pt_row] - r.centers[idx]
    if spec.aspect is None:
        return np.einsum("ij,ij->i", diff, diff) <= r.radii[idx] ** 2
    ratio = spec.aspect.ratio
    if spec.d == 2:
        ang = r.rotations[idx] if r.rotations is not None else np.zeros(len(idx))
        c, s = np.cos(ang), np.sin(ang)
        u = c * diff[:, 0] + s * diff[:, 1]
        w = -s * diff[:, 0] + c * diff[:, 1]
        return (u / (ratio * r.radii[idx])) ** 2 + (w / r.radii[idx]) ** 2 <= 1.0
    rots = (r.rotations[idx] if r.rotations is not None
            else np.broadcast_to(np.eye(3), (len(idx), 3, 3)))
    local = np.einsum("nij,nj->ni", rots, diff)
    scale = np.stack([ratio * r.radii[idx], ratio * r.radii[idx], r.radii[idx]], axis=1)
    return np.sum((local / scale) ** 2, axis=1) <= 1.0


def _check_coverage(r: MediumRealization, points: np.ndarray):
    lows = np.array([lo for lo, _ in r.box]) - 1e-12
    highs = np.array([hi for _, hi in r.box]) + 1e-12
    if np.any(points < lows) or np.any(points > highs):
        raise ValueError("evaluation point outside the covered (unpadded) box")


def eval_V_raw(r: MediumRealization, x):
    """Uncapped field value(s): sum of contrasts over covering inclusions."""
    points = np.atleast_2d(np.asarray(x, dtype=float))
    _check_coverage(r, points)
    out = np.zeros(len(points), dtype=np.complex128)
    if r.tree is not None:
        groups = r.tree.query_ball_point(points, r.max_radius + 1e-300)
        for row, idx in enumerate(groups):
            if not idx:
                continue
            idx = np.asarray(idx)
            hit = _inside_support(r, points, idx, row)
            out[row] = r.contrasts[idx[hit]].sum()
    if np.asarray(x).ndim == 1:
        return complex(out[0])
    return out


def _cap(r: MediumRealization, values):
    """Cap |V - mean| at cap_sigmas * sigma; returns (capped, n_events)."""
    dev = values - r.mean
    mag = np.abs(dev)
    lim = r.spec.cap_sigmas * r.sigma
    over = mag > lim
    n = int(np.count_nonzero(over))
    if n and lim > 0:
        values = np.where(over, r.mean + dev * (lim / np.maximum(mag, 1e-300)), values)
    return values, n


def eval_V(r: MediumRealization, x):
    """Field value(s) V at rescaled point(s) x, with the 8-sigma deviation cap."""
    raw = eval_V_raw(r, x)
    capped, _ = _cap(r, np.atleast_1d(np.asarray(raw)))
    return complex(capped[0]) if np.asarray(x).ndim == 1 else capped


def eval_q(r: MediumRealization, x, with_cap_count: bool = False):
    """Normalized fluctuation q = (V - mean)/sigma at rescaled point(s) x."""
    raw = np.atleast_1d(np.asarray(eval_V_raw(r, x)))
    capped, n = _cap(r, raw)
    q = (capped - r.mean) / r.sigma if r.sigma > 0 else np.zeros_like(capped)
    if np.asarray(x).ndim == 1:
        q = complex(q[0])
    if with_cap_count:
        return q, n
    return q


# ---------------------------------------------------------------------------
# covariance statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CovarianceModel:
    """Integrated covariances of q and the matrix M with its square root.

    The integrals are over field coordinates; ``tau_sq`` includes the medium
    variance factor: tau^2 = sigma^2 (sigma_r^2 + sigma_i^2).
    """

    sigma_r_sq: float
    sigma_i_sq: float
    gamma: float
    M: np.ndarray
    M_half: np.ndarray
    tau_sq: float
    corr_range: float

    @classmethod
    def from_integrals(cls, sigma_r_sq, sigma_i_sq, gamma, sigma, corr_range):
        M = np.array([[sigma_r_sq, gamma], [gamma, sigma_i_sq]])
        return cls(sigma_r_sq=float(sigma_r_sq), sigma_i_sq=float(sigma_i_sq),
                   gamma=float(gamma), M=M, M_half=matrix_sqrt(M),
                   tau_sq=float(sigma ** 2 * (sigma_r_sq + sigma_i_sq)),
                   corr_range=float(corr_range))


def matrix_sqrt(M) -> np.ndarray:
    """Square root of a symmetric nonnegative 2x2 matrix, closed form:

        M_half = (1/t) [[sigma_r^2 + s, gamma], [gamma, sigma_i^2 + s]],
        s = sqrt(sigma_r^2 sigma_i^2 - gamma^2),  t = sqrt(sigma_r^2 + sigma_i^2 + 2 s).
    """
    M = np.asarray(M, dtype=float)
    if M.shape != (2, 2) or abs(M[0, 1] - M[1, 0]) > 1e-12 * (1 + abs(M[0, 1])):
        raise ValueError("M must be a symmetric 2x2 matrix")
    eig = np.linalg.eigvalsh(M)
    if eig[0] < -1e-12 * max(1.0, eig[-1]):
        raise ValueError(f"M has a negative eigenvalue: {eig[0]}")
    a, b, g = M[0, 0], M[1, 1], M[0, 1]
    det = max(a * b - g * g, 0.0)
    s = math.sqrt(det)
    t_sq = a + b + 2.0 * s
    if t_sq <= 0.0:
        return np.zeros((2, 2))
    t = math.sqrt(t_sq)
    return np.array([[a + s, g], [g, b + s]]) / t


def analytic_covariance_model(spec: InclusionSpec) -> CovarianceModel:
    """Closed-form integrated covariances for ball/ellipsoid shot noise.

    Uses that the full-space integral of the overlap volume of a convex body
    with its own translates equals the squared body volume, so e.g.
    sigma_r^2 * Var(W) = lambda * E[(Re tau)^2] * E[vol^2].
    """
    _, re_sq = _uniform_moments(*spec.contrast_re_range)
    _, im_sq = _uniform_moments(*spec.contrast_im_range)
    re_m, _ = _uniform_moments(*spec.contrast_re_range)
    im_m, _ = _uniform_moments(*spec.contrast_im_range)
    cross = re_m * im_m  # E[Re tau Im tau] (independent uniform components)
    f = _shape_factor(spec)
    vol_sq = f * f * _radius_power_moment(spec, 2 * spec.d)
    _, var = moments(spec)
    if var == 0:
        return CovarianceModel.from_integrals(0.0, 0.0, 0.0, 0.0, 0.0)
    lam = spec.intensity
    sigma = math.sqrt(var)
    return CovarianceModel.from_integrals(
        sigma_r_sq=lam * re_sq * vol_sq / var,
        sigma_i_sq=lam * im_sq * vol_sq / var,
        gamma=lam * cross * vol_sq / var,
        sigma=sigma,
        corr_range=2.0 * spec.radius_range[1])


@dataclass(frozen=True)
class LagCovariance:
    lags: np.ndarray          # (n_lags, d), rescaled offsets
    cov_rr: np.ndarray
    cov_ii: np.ndarray
    cov_ri: np.ndarray
    se_rr: np.ndarray
    se_ii: np.ndarray
    se_ri: np.ndarray
    n_samples: int


def empirical_covariance(spec: InclusionSpec, lags, n_samples: int,
                         seed: int = 0) -> LagCovariance:
    """Unbiased Monte-Carlo estimates of E{q_a(0) q_b(lag)} with standard errors.

    Lags are rescaled offsets; the base point is the origin.
    """
    if n_samples < 2:
        raise ValueError("need at least 2 samples")
    lags = np.atleast_2d(np.asarray(lags, dtype=float))
    pts = np.vstack([np.zeros(spec.d), lags])
    span = np.abs(pts).max() + spec.beta * spec.radius_range[1] + 1.0 * spec.beta
    box = tuple((-span, span) for _ in range(spec.d))
    prods = {key: np.zeros((n_samples, len(lags))) for key in ("rr", "ii", "ri")}
    ss = np.random.SeedSequence(seed)
    for i, child in enumerate(ss.spawn(n_samples)):
        r = sample_realization(spec, box, child.generate_state(1)[0])
        q = np.asarray(eval_q(r, pts))
        q0r, q0i = q[0].real, q[0].imag
        prods["rr"][i] = q0r * q[1:].real
        prods["ii"][i] = q0i * q[1:].imag
        prods["ri"][i] = q0r * q[1:].imag
    out = {}
    for key, arr in prods.items():
        out[key] = arr.mean(axis=0)
        out["se_" + key] = arr.std(axis=0, ddof=1) / math.sqrt(n_samples)
    return LagCovariance(lags=lags, cov_rr=out["rr"], cov_ii=out["ii"],
                         cov_ri=out["ri"], se_rr=out["se_rr"],
                         se_ii=out["se_ii"], se_ri=out["se_ri"],
                         n_samples=n_samples)


def _raster_on_lattice(r: MediumRealization, grid_axes):
    """q sampled on a lattice given by per-axis coordinate arrays."""
    shape = tuple(len(a) for a in grid_axes)
    mesh = np.meshgrid(*grid_axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    vals = np.asarray(eval_q(r, pts)).reshape(shape)
    return vals


def lattice_covariance(spec: InclusionSpec, extent: float, spacing: float,
                       n_samples: int, seed: int = 0):
    """FFT-averaged lag covariance of q on a cubic lattice (field coordinates).

    Returns (lag axes 1D array, cov_rr, cov_ii, cov_ri) where each covariance
    array is indexed by signed lag on every axis.  Uses a beta=1 copy of the
    spec: the field-coordinate law of q does not depend on beta.
    """
    spec1 = spec.with_beta(1.0)
    n = int(round(extent / spacing))
    axis = (np.arange(n) - n // 2) * spacing
    axes = [axis] * spec1.d
    box = tuple((axis[0], axis[-1]) for _ in range(spec1.d))
    nfft = tuple(2 * n for _ in range(spec1.d))
    # overlap counts for the zero-padded autocorrelation
    fft_axes = tuple(range(spec1.d))
    ones = np.ones([n] * spec1.d)
    counts = np.fft.irfftn(np.abs(np.fft.rfftn(ones, s=nfft, axes=fft_axes)) ** 2,
                           s=nfft, axes=fft_axes)
    counts = np.fft.fftshift(counts)
    acc = {key: 0.0 for key in ("rr", "ii", "ri")}
    ss = np.random.SeedSequence(seed)
    for child in ss.spawn(n_samples):
        r = sample_realization(spec1, box, child.generate_state(1)[0])
        q = _raster_on_lattice(r, axes)
        fr = np.fft.rfftn(q.real, s=nfft, axes=fft_axes)
        fi = np.fft.rfftn(q.imag, s=nfft, axes=fft_axes)
        acc["rr"] += np.fft.fftshift(np.fft.irfftn(fr * np.conj(fr), s=nfft, axes=fft_axes))
        acc["ii"] += np.fft.fftshift(np.fft.irfftn(fi * np.conj(fi), s=nfft, axes=fft_axes))
        acc["ri"] += np.fft.fftshift(np.fft.irfftn(fr * np.conj(fi), s=nfft, axes=fft_axes))
    lag_axis = (np.arange(2 * n) - n) * spacing
    out = {}
    safe = np.maximum(counts, 1e-9)
    for key in acc:
        out[key] = acc[key] / (n_samples * safe)
        out[key][counts < 0.5] = 0.0
    return lag_axis, out["rr"], out["ii"], out["ri"]


def covariance_model_from_lattice(spec: InclusionSpec, n_samples: int = 200,
                                  seed: int = 0, spacing: float = 0.25,
                                  extent: float = 16.0) -> CovarianceModel:
    """Integrated covariances by trapezoid lag-sum over an empirical lattice."""
    lag_axis, crr, cii, cri = lattice_covariance(spec, extent, spacing, n_samples, seed)
    support = 2.0 * spec.radius_range[1] * (1.0 if spec.aspect is None else 1.0)
    mask = np.ones_like(crr, dtype=bool)
    mesh = np.meshgrid(*([lag_axis] * spec.d), indexing="ij")
    dist = np.sqrt(sum(m ** 2 for m in mesh))
    mask &= dist <= support + spacing
    w = spacing ** spec.d
    _, var = moments(spec)
    sigma = math.sqrt(var)
    return CovarianceModel.from_integrals(
        sigma_r_sq=float(np.sum(crr[mask]) * w),
        sigma_i_sq=float(np.sum(cii[mask]) * w),
        gamma=float(np.sum(cri[mask]) * w),
        sigma=sigma,
        corr_range=support)


# ---------------------------------------------------------------------------
# serialization: JSON manifest + little-endian float64 inclusion table
# ---------------------------------------------------------------------------

def save_realization(r: MediumRealization, path) -> Path:
    """Write ``path`` (binary inclusion table) + ``path.json`` manifest."""
    path = Path(path)
    d = r.spec.d
    rot_cols = 0
    if r.rotations is not None:
        rot_cols = 1 if d == 2 else 9
    cols = d + 3 + rot_cols
    table = np.zeros((len(r.centers), cols), dtype="<f8")
    table[:, :d] = r.centers
    table[:, d] = r.radii
    table[:, d + 1] = r.contrasts.real
    table[:, d + 2] = r.contrasts.imag
    if rot_cols:
        table[:, d + 3:] = r.rotations.reshape(len(r.centers), rot_cols)
    payload = table.tobytes()
    path.write_bytes(payload)
    spec = r.spec
    manifest = {
        "format": "slabwave-medium-v1",
        "endianness": "little",
        "seed": r.seed,
        "count": len(r.centers),
        "columns": cols,
        "box": [list(b) for b in r.box],
        "mean": [r.mean.real, r.mean.imag],
        "sigma": r.sigma,
        "spec": {
            "intensity": spec.intensity,
            "radius_range": list(spec.radius_range),
            "contrast_re_range": list(spec.contrast_re_range),
            "contrast_im_range": list(spec.contrast_im_range),
            "beta": spec.beta,
            "d": spec.d,
            "aspect": None if spec.aspect is None else
                [spec.aspect.ratio, spec.aspect.random_rotation],
            "cap_sigmas": spec.cap_sigmas,
        },
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_realization(path) -> MediumRealization:
    path = Path(path)
    man = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    payload = path.read_bytes()
    if hashlib.sha256(payload).hexdigest() != man["sha256"]:
        raise ValueError(f"checksum mismatch for {path}")
    sp = man["spec"]
    aspect = None if sp["aspect"] is None else AspectSpec(*sp["aspect"])
    spec = InclusionSpec(intensity=sp["intensity"],
                         radius_range=tuple(sp["radius_range"]),
                         contrast_re_range=tuple(sp["contrast_re_range"]),
                         contrast_im_range=tuple(sp["contrast_im_range"]),
                         beta=sp["beta"], d=sp["d"], aspect=aspect,
                         cap_sigmas=sp["cap_sigmas"])
    d = spec.d
    table = np.frombuffer(payload, dtype="<f8").reshape(man["count"], man["columns"])
    rotations = None
    rot_cols = man["columns"] - d - 3
    if rot_cols:
        rotations = table[:, d + 3:].copy()
        if rot_cols == 1:
            rotations = rotations.ravel()
        else:
            rotations = rotations.reshape(-1, 3, 3)
    centers = table[:, :d].copy()
    return MediumRealization(
        spec=spec, seed=man["seed"], box=tuple(tuple(b) for b in man["box"]),
        centers=centers, radii=table[:, d].copy(),
        contrasts=table[:, d + 1] + 1j * table[:, d + 2],
        rotations=rotations, mean=complex(*man["mean"]), sigma=man["sigma"],
        tree=cKDTree(centers) if man["count"] else None)
