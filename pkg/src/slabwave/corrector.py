"""Born corrector, limiting Gaussian corrector, and fluctuation statistics.

The homogenization error u^beta - u, normalized by beta^{d/2}, converges in
distribution to a Gaussian field

    v(x) = sigma k^2 int_S G(x, y) chi(y) u(y) dW_y,

where G is the outgoing Green's function of the homogenized operator
(normalized here so that (Delta + k^2 nbar^2) G = -delta), chi the slab
indicator and dW a complex white noise whose 2x2 real covariance is the
matrix M of integrated medium covariances.  This module computes the Born
corrector v^beta by a sparse solve, samples the limit field from a discrete
Wiener grid, evaluates the covariance quadrature

    E{v(x) v*(y)} = k^4 tau^2 int_S G(x,z) G*(y,z) |chi(z) u(z)|^2 dz,

and runs the central-limit and scaling studies over seeded ensembles.
"""

from __future__ import annotations

import hashlib
import json
import math
import multiprocessing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.stats

from .core import ComplexField, Grid, LayerStack, principal_sqrt
from .medium import (CovarianceModel, InclusionSpec, MediumRealization,
                     eval_q, sample_realization)
from .helmholtz import (SolverConfig, _cached_solver, mode_green,
                        solve_homogenized, solve_random)

__all__ = [
    "WienerGrid", "wiener_grid_for", "born_corrector", "green_field",
    "apply_green_transform", "sample_limit_corrector", "corrector_covariance",
    "CorrectorEnsemble", "build_ensemble", "make_test_functions",
    "clt_prediction", "clt_statistics", "clt_test", "CltResult",
    "fit_scaling", "scaling_study", "ScalingResult", "empirical_hs_seminorm",
    "save_ensemble", "load_ensemble",
]


# ---------------------------------------------------------------------------
# Wiener grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WienerGrid:
    """Uniform partition of (a rectangle of) the slab S carrying white noise.

    Per-cell complex increments are

        dW_c = (1, i) . M_half . (xi_1, xi_2)^T . sqrt(vol(cell))

    with xi_1, xi_2 independent standard normals, so that
    E|dW_c|^2 = (sigma_r^2 + sigma_i^2) vol(cell).
    """

    box: tuple                 # ((x_lo, x_hi), (z_lo, z_hi)), z range in slab
    shape: tuple               # number of cells per axis
    M_half: tuple              # 2x2 matrix, stored row-major as a flat tuple
    seed: int

    def __post_init__(self):
        if len(self.box) != 2 or len(self.shape) != 2:
            raise ValueError("WienerGrid is two-dimensional")
        if any(n < 1 for n in self.shape):
            raise ValueError("need at least one cell per axis")
        if len(self.M_half) != 4:
            raise ValueError("M_half must be a flat 2x2 tuple")

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_volume(self) -> float:
        return float(np.prod([(hi - lo) / n
                              for (lo, hi), n in zip(self.box, self.shape)]))

    @property
    def cell_sizes(self) -> tuple:
        return tuple((hi - lo) / n for (lo, hi), n in zip(self.box, self.shape))

    def centers(self) -> np.ndarray:
        axes = [lo + (hi - lo) * (np.arange(n) + 0.5) / n
                for (lo, hi), n in zip(self.box, self.shape)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def increments(self, seed=None) -> np.ndarray:
        """Complex white-noise increments for every cell, flat row-major."""
        rng = np.random.default_rng(
            np.random.SeedSequence([self.seed if seed is None else int(seed)]))
        xi = rng.standard_normal((2, self.n_cells))
        mh = np.asarray(self.M_half, dtype=float).reshape(2, 2)
        w = mh @ xi
        return (w[0] + 1j * w[1]) * math.sqrt(self.cell_volume)


def wiener_grid_for(stack: LayerStack, k: float, cov: CovarianceModel,
                    x_range, seed: int,
                    cells_per_wavelength: float = 8.0) -> WienerGrid:
    """Wiener grid over the slab cross-section with resolved cells."""
    lam = 2.0 * math.pi / (k * math.sqrt(stack.ne_sq.real))
    h = lam / cells_per_wavelength
    x_lo, x_hi = float(x_range[0]), float(x_range[1])
    nx = max(1, int(math.ceil((x_hi - x_lo) / h)))
    nz = max(1, int(math.ceil(stack.L / h)))
    return WienerGrid(box=((x_lo, x_hi), (-stack.L, 0.0)), shape=(nx, nz),
                      M_half=tuple(np.asarray(cov.M_half).ravel()), seed=seed)


def _sigma_of(cov: CovarianceModel) -> float:
    tot = cov.sigma_r_sq + cov.sigma_i_sq
    return math.sqrt(cov.tau_sq / tot) if tot > 0 else 0.0


# ---------------------------------------------------------------------------
# Born corrector
# ---------------------------------------------------------------------------

def _slab_mask(grid: Grid, stack: LayerStack) -> np.ndarray:
    _, zz = grid.meshgrid()
    return (zz <= 0.0) & (zz > -stack.L)


def born_corrector(r: MediumRealization, u: ComplexField, stack: LayerStack,
                   k: float, cfg: SolverConfig = SolverConfig(), *,
                   sigma: float) -> ComplexField:
    """First-order corrector: solve (Delta + k^2 nbar^2) v = -sigma k^2 chi q u.

    ``u`` must be the homogenized solution on the same grid the corrector is
    wanted on; the factorized homogenized operator is reused.
    """
    grid = u.grid
    if grid.ndim != 2:
        raise ValueError("the corrector solver is two-dimensional")
    if sigma == 0.0:
        return ComplexField.zeros(grid)
    h = grid.spacing[0]
    if h > r.spec.beta / 4.0 + 1e-12:
        raise ValueError(
            f"grid spacing {h:g} does not resolve the correlation scale "
            f"beta={r.spec.beta:g} with >= 4 points")
    slab = _slab_mask(grid, stack)
    xx, zz = grid.meshgrid()
    pts = np.stack([xx[slab], zz[slab]], axis=-1)
    q = np.asarray(eval_q(r, pts))
    rhs = np.zeros(grid.shape, dtype=np.complex128)
    rhs[slab] = -sigma * k * k * q * u.values[slab]
    return solve_homogenized(ComplexField(grid, rhs), stack, k, cfg)


def green_field(x, stack: LayerStack, k: float, grid: Grid,
                cfg: SolverConfig = SolverConfig()) -> ComplexField:
    """Discrete Green's function G(x, .) on the grid.

    Solves the homogenized problem with a grid delta of weight -1 at the node
    nearest ``x``, so the result approximates the outgoing Green's function
    with (Delta + k^2 nbar^2) G = -delta; by reciprocity the field gives
    G(x, y) for every grid point y.
    """
    solver = _cached_solver(stack, float(k), grid, cfg)
    idx = tuple(int(round((x[i] - grid.origin[i]) / grid.spacing[i]))
                for i in range(2))
    if any(j < 0 or j >= grid.shape[i] for i, j in enumerate(idx)):
        raise ValueError("source point outside the grid")
    f = np.zeros(grid.shape, dtype=np.complex128)
    f[idx] = -1.0 / grid.cell_volume
    u, _ = solver.solve(f)
    return u


# ---------------------------------------------------------------------------
# Mode-transform quadrature oracle for applying G to a slab source
# ---------------------------------------------------------------------------

def apply_green_transform(probe, g: ComplexField, stack: LayerStack, k: float,
                          tail_tol: float = 1e-10) -> complex:
    """int G(x, y) g(y) dy for a slab-supported source, by mode quadrature.

    Independent of the grid solver: the Green's function is assembled from
    its transverse modes, I(x) = -(1/pi) int_0^inf sum_y Ghat_xi(z_x, z_y)
    g(y) cos(xi (x_1 - y_1)) dy dxi, with the source treated as point masses
    of weight h^2 at the grid nodes.  The probe must lie strictly above the
    slab (different layer from the support, so no singular part arises).
    """
    x1, zx = float(probe[0]), float(probe[1])
    if zx <= 0.0:
        raise ValueError("the transform oracle requires a probe in the air")
    grid = g.grid
    slab = _slab_mask(grid, stack)
    cols = np.nonzero(slab.any(axis=0))[0]
    zs = grid.axis(1)[cols]
    gv = g.values[:, cols]
    mask_out = ~slab[:, cols]
    if np.any(g.values[:, np.nonzero(~slab.any(axis=0))[0]] != 0) or \
            np.any(gv[mask_out] != 0):
        raise ValueError("source must be supported in the slab")
    y1 = grid.axis(0)
    dx = x1 - y1
    h2 = grid.cell_volume

    nodes16, weights16 = np.polynomial.legendre.leggauss(24)

    def panel(a, b):
        total = 0.0 + 0.0j
        # sub-panels no wider than one transverse oscillation period
        max_dx = max(np.max(np.abs(dx)), 1e-6)
        sub = max(1, int(math.ceil((b - a) * max_dx / (2.0 * math.pi))))
        edges = np.linspace(a, b, sub + 1)
        for lo, hi in zip(edges[:-1], edges[1:]):
            xi_n = 0.5 * (hi + lo) + 0.5 * (hi - lo) * nodes16
            w_n = 0.5 * (hi - lo) * weights16
            for xi, w in zip(xi_n, w_n):
                m = mode_green(float(xi), zx, stack, k)
                ghat = m(zs)                       # Ghat(z, zx) = Ghat(zx, z)
                t = np.cos(xi * dx) @ gv           # (n_z,)
                total += w * np.sum(ghat * t)
        return total * h2

    branch = sorted({k * principal_sqrt(n).real
                     for n in (stack.n0_sq, stack.ne_sq, stack.n2_sq)})
    pts = [0.0] + [b for b in branch if b > 1e-12]
    total = 0.0 + 0.0j
    for a, b in zip(pts[:-1], pts[1:]):
        total += panel(a, b)
    # evanescent tail: doubling panels until negligible
    a = pts[-1]
    width = max(pts[-1], 1.0)
    while True:
        c = panel(a, a + width)
        total += c
        if abs(c) < tail_tol * max(abs(total), 1e-300):
            break
        a += width
        width *= 2.0
        if a > 1e5:
            raise RuntimeError("transform tail failed to converge")
    return complex(-total / math.pi)


# ---------------------------------------------------------------------------
# Limiting Gaussian corrector
# ---------------------------------------------------------------------------

def _limit_kernel(u: ComplexField, stack: LayerStack, k: float,
                  out_points: np.ndarray, wg: WienerGrid,
                  cfg: SolverConfig) -> np.ndarray:
    """Kernel G(x_j, y_c) chi u(y_c) for Wiener-sum sampling, (n_out, n_cells)."""
    lam = 2.0 * math.pi / (k * math.sqrt(stack.ne_sq.real))
    if max(wg.cell_sizes) > lam / 8.0 + 1e-12:
        raise ValueError(
            f"Wiener cells of size {max(wg.cell_sizes):g} do not resolve the "
            f"effective wavelength {lam:g} with >= 8 cells")
    (_, _), (z_lo, z_hi) = wg.box
    if z_lo < -stack.L - 1e-12 or z_hi > 1e-12:
        raise ValueError("Wiener grid must lie inside the slab")
    centers = wg.centers()
    u_c = u.interp(centers)
    rows = []
    for x in np.atleast_2d(out_points):
        gf = green_field(x, stack, k, u.grid, cfg)
        rows.append(gf.interp(centers) * u_c)
    return np.asarray(rows)


def sample_limit_corrector(u: ComplexField, stack: LayerStack, k: float,
                           cov: CovarianceModel, wg: WienerGrid, *,
                           out_points=None, out_grid: Grid = None,
                           cfg: SolverConfig = SolverConfig(), seed=None,
                           kernel: np.ndarray = None):
    """One sample of the limiting corrector, v(x) = sigma k^2 sum_c
    G(x, y_c) chi u(y_c) dW_c, at ``out_points`` or on ``out_grid``.

    Deterministic given the Wiener grid seed.  Pass a precomputed ``kernel``
    (from repeated calls with the same geometry) to amortize the Green's
    function solves across seeds.
    """
    if (out_points is None) == (out_grid is None):
        raise ValueError("specify exactly one of out_points or out_grid")
    pts = out_grid.points() if out_grid is not None else np.atleast_2d(
        np.asarray(out_points, dtype=float))
    if kernel is None:
        kernel = _limit_kernel(u, stack, k, pts, wg, cfg)
    dw = wg.increments(seed)
    v = _sigma_of(cov) * k * k * (kernel @ dw)
    if out_grid is not None:
        return ComplexField(out_grid, v.reshape(out_grid.shape))
    return v


def corrector_covariance(x, y, u: ComplexField, stack: LayerStack, k: float,
                         cov: CovarianceModel,
                         cfg: SolverConfig = SolverConfig()) -> complex:
    """Covariance quadrature E{v(x) v*(y)} = k^4 tau^2
    int_S G(x,z) G*(y,z) |chi(z) u(z)|^2 dz, with tau^2 = sigma^2
    (sigma_r^2 + sigma_i^2)."""
    grid = u.grid
    slab = _slab_mask(grid, stack)
    gx = green_field(x, stack, k, grid, cfg).values[slab]
    gy = green_field(y, stack, k, grid, cfg).values[slab]
    dens = np.abs(u.values[slab]) ** 2
    acc = np.sum(gx * np.conj(gy) * dens) * grid.cell_volume
    return complex(k ** 4 * cov.tau_sq * acc)


# ---------------------------------------------------------------------------
# Ensembles: central-limit and scaling studies
# ---------------------------------------------------------------------------

def make_test_functions(grid: Grid, k_region, n: int = 3) -> tuple:
    """Gaussian bumps supported in the detector rectangle K."""
    (x_lo, x_hi), (z_lo, z_hi) = k_region
    xc = np.linspace(x_lo, x_hi, n + 2)[1:-1]
    zc = 0.5 * (z_lo + z_hi)
    wx = (x_hi - x_lo) / (2.0 * (n + 1))
    wz = (z_hi - z_lo) / 6.0
    xx, zz = grid.meshgrid()
    inside = (xx >= x_lo) & (xx <= x_hi) & (zz >= z_lo) & (zz <= z_hi)
    phis = []
    for c in xc:
        vals = np.exp(-((xx - c) / wx) ** 2 - ((zz - zc) / wz) ** 2)
        phis.append(ComplexField(grid, np.where(inside, vals, 0.0)))
    return tuple(phis)


def _region_mask(grid: Grid, region) -> np.ndarray:
    (x_lo, x_hi), (z_lo, z_hi) = region
    xx, zz = grid.meshgrid()
    return (xx >= x_lo) & (xx <= x_hi) & (zz >= z_lo) & (zz <= z_hi)


def _config_hash(stack, k, sigma, spec, config, grid) -> str:
    payload = repr((stack, k, sigma, spec, config, grid)).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


@dataclass(frozen=True)
class CorrectorEnsemble:
    """Seeded ensemble of random solves with projections and norms.

    ``proj_du`` and ``proj_v`` hold the bilinear pairings (u^beta - u, phi)
    and (v^beta, phi) with shape (n_beta, n_seed, n_phi); the norms are
    L^2(K).  Members are identified by (beta, seed) and the shared solver
    configuration hash.
    """

    stack: LayerStack
    k: float
    sigma: float
    spec: InclusionSpec
    config: SolverConfig
    beta_values: tuple
    seeds: tuple
    k_region: tuple
    u: ComplexField
    phis: tuple
    proj_du: np.ndarray
    proj_v: np.ndarray
    norm_v: np.ndarray
    norm_resid: np.ndarray
    config_hash: str
    fields: tuple = field(default=(), repr=False)

    def manifest(self) -> dict:
        return {
            "format": "slabwave-ensemble-v1",
            "beta_values": list(self.beta_values),
            "seeds": [int(s) for s in self.seeds],
            "k": self.k, "sigma": self.sigma,
            "config_hash": self.config_hash,
            "n_phi": len(self.phis),
        }


def _member_task(args):
    (f, u, stack, k, sigma, spec, beta, seed, box, config,
     phi_vals, k_mask, keep_fields) = args
    r = sample_realization(spec.with_beta(beta), box, seed)
    u_beta = solve_random(r, f, stack, k, sigma, config)
    v = born_corrector(r, u, stack, k, config, sigma=sigma)
    du = u_beta.values - u.values
    h2 = u.grid.cell_volume
    proj_du = np.array([np.sum(du * p) * h2 for p in phi_vals])
    proj_v = np.array([np.sum(v.values * p) * h2 for p in phi_vals])
    norm_v = math.sqrt(float(np.sum(np.abs(v.values[k_mask]) ** 2)) * h2)
    resid = du - v.values
    norm_resid = math.sqrt(float(np.sum(np.abs(resid[k_mask]) ** 2)) * h2)
    fields = (du, v.values) if keep_fields else None
    return proj_du, proj_v, norm_v, norm_resid, fields


def build_ensemble(f: ComplexField, stack: LayerStack, k: float, sigma: float,
                   spec: InclusionSpec, beta_values, seeds, k_region,
                   phis=None, config: SolverConfig = SolverConfig(),
                   n_jobs: int = 1, keep_fields: bool = False,
                   progress=None) -> CorrectorEnsemble:
    """Run (beta, seed) members with common seeds across beta values.

    Members are independent; with ``n_jobs > 1`` they run in a process pool
    and are reduced in task order, so results are identical for any worker
    count.
    """
    beta_values = tuple(float(b) for b in beta_values)
    seeds = tuple(int(s) for s in seeds)
    u = solve_homogenized(f, stack, k, config)
    grid = f.grid
    if phis is None:
        phis = make_test_functions(grid, k_region)
    (x_lo, x_hi), _ = grid.bounds()
    box = ((x_lo, x_hi), (-stack.L, 0.0))
    k_mask = _region_mask(grid, k_region)
    phi_vals = tuple(p.values for p in phis)
    tasks = [(f, u, stack, k, sigma, spec, beta, seed, box, config,
              phi_vals, k_mask, keep_fields)
             for beta in beta_values for seed in seeds]
    if n_jobs > 1:
        # "spawn" avoids fork-after-threads deadlocks with threaded BLAS
        ctx = multiprocessing.get_context("spawn")
        with ctx.Pool(n_jobs) as pool:
            results = []
            for i, res in enumerate(pool.imap(_member_task, tasks)):
                results.append(res)
                if progress is not None:
                    progress(i + 1, len(tasks))
    else:
        results = []
        for i, t in enumerate(tasks):
            results.append(_member_task(t))
            if progress is not None:
                progress(i + 1, len(tasks))
    nb, ns, np_ = len(beta_values), len(seeds), len(phis)
    proj_du = np.array([r[0] for r in results]).reshape(nb, ns, np_)
    proj_v = np.array([r[1] for r in results]).reshape(nb, ns, np_)
    norm_v = np.array([r[2] for r in results]).reshape(nb, ns)
    norm_resid = np.array([r[3] for r in results]).reshape(nb, ns)
    fields = tuple(r[4] for r in results) if keep_fields else ()
    return CorrectorEnsemble(
        stack=stack, k=float(k), sigma=float(sigma), spec=spec, config=config,
        beta_values=beta_values, seeds=seeds, k_region=tuple(k_region), u=u,
        phis=tuple(phis), proj_du=proj_du, proj_v=proj_v, norm_v=norm_v,
        norm_resid=norm_resid,
        config_hash=_config_hash(stack, k, sigma, spec, config, grid),
        fields=fields)


# ---------------------------------------------------------------------------
# Central-limit test
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CltResult:
    n_samples: int
    beta: float
    pred_cov: np.ndarray        # 2x2 covariance of (Re, Im) projections
    emp_cov: np.ndarray
    ks_stat: tuple              # (real marginal, imaginary marginal)
    ks_p: tuple
    cov_ratio: float            # trace(emp) / trace(pred)
    mean: np.ndarray

    def as_row(self) -> dict:
        return {"n": self.n_samples, "beta": self.beta,
                "ks_p_re": self.ks_p[0], "ks_p_im": self.ks_p[1],
                "cov_ratio": self.cov_ratio,
                "pred_var_re": self.pred_cov[0, 0],
                "pred_var_im": self.pred_cov[1, 1],
                "emp_var_re": self.emp_cov[0, 0],
                "emp_var_im": self.emp_cov[1, 1]}


def clt_prediction(u: ComplexField, stack: LayerStack, k: float,
                   phi: ComplexField, cov: CovarianceModel,
                   cfg: SolverConfig = SolverConfig()) -> np.ndarray:
    """Limit covariance of (Re, Im) of beta^{-d/2} (v^beta, phi).

    Equals sigma^2 k^4 int_S A(y) M A^T(y) dy with A built from
    m0 = chi u w, where w solves the (complex-symmetric) homogenized problem
    with source phi, so that (v, phi) = (rhs, w) by bilinearity.
    """
    w = solve_homogenized(phi, stack, k, cfg)
    slab = _slab_mask(u.grid, stack)
    m0 = u.values[slab] * w.values[slab]
    a, b = m0.real, m0.imag
    m11, m12, m22 = cov.M[0, 0], cov.M[0, 1], cov.M[1, 1]
    h2 = u.grid.cell_volume
    s11 = np.sum(a * a * m11 - 2 * a * b * m12 + b * b * m22) * h2
    s12 = np.sum(a * b * (m11 - m22) + (a * a - b * b) * m12) * h2
    s22 = np.sum(b * b * m11 + 2 * a * b * m12 + a * a * m22) * h2
    sig = _sigma_of(cov)
    return (sig * k * k) ** 2 * np.array([[s11, s12], [s12, s22]])


def clt_statistics(zeta: np.ndarray, pred_cov: np.ndarray,
                   beta: float = float("nan")) -> CltResult:
    """Kolmogorov-Smirnov and covariance comparison of complex samples
    against the mean-zero Gaussian law with the given 2x2 covariance."""
    zeta = np.asarray(zeta)
    re, im = zeta.real, zeta.imag
    pred_cov = np.asarray(pred_cov, dtype=float)
    tr_pred = pred_cov[0, 0] + pred_cov[1, 1]
    if tr_pred == 0.0:
        if np.all(zeta == 0.0):
            return CltResult(len(zeta), beta, pred_cov, np.zeros((2, 2)),
                             (0.0, 0.0), (1.0, 1.0), 1.0, np.zeros(2))
        raise ValueError("degenerate prediction with nonzero samples")
    stats, ps = [], []
    for comp, var in ((re, pred_cov[0, 0]), (im, pred_cov[1, 1])):
        if var <= 0:
            stats.append(float(np.max(np.abs(comp)) > 0))
            ps.append(1.0)
            continue
        res = scipy.stats.kstest(comp / math.sqrt(var), "norm")
        stats.append(float(res.statistic))
        ps.append(float(res.pvalue))
    emp = np.cov(np.stack([re, im]), bias=False)
    ratio = float((emp[0, 0] + emp[1, 1]) / tr_pred)
    return CltResult(len(zeta), beta, pred_cov, emp, tuple(stats), tuple(ps),
                     ratio, np.array([re.mean(), im.mean()]))


def clt_test(ensemble: CorrectorEnsemble, phi_index: int,
             cov: CovarianceModel, beta: float = None,
             use_born: bool = False, min_samples: int = 200) -> CltResult:
    """Compare the empirical law of (u^beta - u, phi) / beta^{d/2} at the
    smallest beta (or the one given) against its Gaussian limit."""
    if beta is None:
        beta = min(ensemble.beta_values)
    bi = ensemble.beta_values.index(beta)
    if len(ensemble.seeds) < min_samples:
        raise ValueError(
            f"need >= {min_samples} ensemble members, have {len(ensemble.seeds)}")
    proj = ensemble.proj_v if use_born else ensemble.proj_du
    zeta = proj[bi, :, phi_index] / beta          # beta^{d/2} at d = 2
    pred = clt_prediction(ensemble.u, ensemble.stack, ensemble.k,
                          ensemble.phis[phi_index], cov, ensemble.config)
    return clt_statistics(zeta, pred, beta)


# ---------------------------------------------------------------------------
# Scaling study
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalingResult:
    beta_values: tuple
    mean_v: np.ndarray
    mean_resid: np.ndarray
    slope_v: float
    slope_v_se: float
    slope_resid: float
    slope_resid_se: float
    monotone: bool
    skipped: bool = False


def _jackknife_slope(log_beta: np.ndarray, norms: np.ndarray):
    """Slope of log(mean norm) vs log(beta) with leave-one-seed-out error."""
    n_seed = norms.shape[1]
    def slope(mat):
        y = np.log(mat.mean(axis=1))
        return np.polyfit(log_beta, y, 1)[0]
    full = slope(norms)
    if n_seed < 3:
        return full, float("nan")
    reps = np.array([slope(np.delete(norms, i, axis=1))
                     for i in range(n_seed)])
    se = math.sqrt((n_seed - 1) / n_seed * np.sum((reps - reps.mean()) ** 2))
    return full, se


def fit_scaling(ensemble: CorrectorEnsemble) -> ScalingResult:
    """Fitted exponents of E||v^beta|| and E||u^beta - u - v^beta|| in beta."""
    betas = np.asarray(ensemble.beta_values, dtype=float)
    if len(betas) < 3 or betas.max() / betas.min() < 4.0 - 1e-9:
        raise ValueError("need >= 3 beta values spanning a factor >= 4")
    if ensemble.sigma == 0.0 or np.all(ensemble.norm_v == 0.0):
        return ScalingResult(tuple(betas), ensemble.norm_v.mean(axis=1),
                             ensemble.norm_resid.mean(axis=1),
                             float("nan"), float("nan"), float("nan"),
                             float("nan"), True, skipped=True)
    lb = np.log(betas)
    sv, sv_se = _jackknife_slope(lb, ensemble.norm_v)
    sr, sr_se = _jackknife_slope(lb, ensemble.norm_resid)
    order = np.argsort(betas)
    mv = ensemble.norm_v.mean(axis=1)[order]
    mr = ensemble.norm_resid.mean(axis=1)[order]
    monotone = bool(np.all(np.diff(mv) > 0) and np.all(np.diff(mr) > 0))
    return ScalingResult(tuple(betas), ensemble.norm_v.mean(axis=1),
                         ensemble.norm_resid.mean(axis=1),
                         float(sv), float(sv_se), float(sr), float(sr_se),
                         monotone)


def scaling_study(beta_values, n_seeds: int, *, f, stack, k, sigma, spec,
                  k_region, config: SolverConfig = SolverConfig(),
                  seed_base: int = 0, n_jobs: int = 1, progress=None):
    """Build a common-seed ensemble over the beta values and fit exponents."""
    seeds = [seed_base + i for i in range(n_seeds)]
    ens = build_ensemble(f, stack, k, sigma, spec, beta_values, seeds,
                         k_region, config=config, n_jobs=n_jobs,
                         progress=progress)
    return fit_scaling(ens), ens


# ---------------------------------------------------------------------------
# Smoothness sanity check
# ---------------------------------------------------------------------------

def empirical_hs_seminorm(v: ComplexField, region, s: float = 0.4,
                          max_points: int = 400) -> float:
    """Discrete H^s Gagliardo seminorm of v over a rectangle.

    [v]^2 = sum_{x != y} |v(x) - v(y)|^2 / |x - y|^{d + 2s} h^{2d}, on a
    subsample of at most ``max_points`` region nodes.
    """
    mask = _region_mask(v.grid, region)
    pts = v.grid.points()[mask.ravel()]
    vals = v.values[mask]
    n_total = len(vals)
    if n_total > max_points:
        step = int(math.ceil(n_total / max_points))
        pts, vals = pts[::step], vals[::step]
    diff = np.abs(vals[:, None] - vals[None, :]) ** 2
    dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    np.fill_diagonal(dist, np.inf)
    # each kept point represents n_total / n_kept cells of the double integral
    w = (v.grid.cell_volume * n_total / len(vals)) ** 2
    return math.sqrt(float(np.sum(diff / dist ** (2 + 2 * s))) * w)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_ensemble(ensemble: CorrectorEnsemble, path) -> Path:
    """Manifest as JSON next to an .npz of projections and norms."""
    path = Path(path)
    np.savez(path.with_suffix(".npz"), proj_du=ensemble.proj_du,
             proj_v=ensemble.proj_v, norm_v=ensemble.norm_v,
             norm_resid=ensemble.norm_resid)
    path.with_suffix(".json").write_text(
        json.dumps(ensemble.manifest(), indent=2))
    return path.with_suffix(".json")


def load_ensemble(path) -> dict:
    """Load the stored statistics (not the full solver state)."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("format") != "slabwave-ensemble-v1":
        raise ValueError("not an ensemble manifest")
    data = np.load(path.with_suffix(".npz"))
    manifest["proj_du"] = data["proj_du"]
    manifest["proj_v"] = data["proj_v"]
    manifest["norm_v"] = data["norm_v"]
    manifest["norm_resid"] = data["norm_resid"]
    return manifest
