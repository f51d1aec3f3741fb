"""High-frequency limit: ray transport, Wigner density and correlations.

Takes the homogenized field of a small scene, converts its incoherent
energy into phase-space rays, traces them through the slab (interface
splitting, total internal reflection, absorption), and prints the energy
ledger.  The deposited Wigner density then yields the two-point correlation
model C0(x, y), which is compared against the coherent intensity |u|^2.

Run from the repository root:

    python3 demos/transport_wigner.py
"""

import math
from pathlib import Path

import numpy as np

from slabwave import (ComplexField, CovarianceModel, Grid, LayerStack,
                      TransportMedium, analytic_covariance_model,
                      correlation_C0, detector_flux_csv, emit_source,
                      flux_balance, InclusionSpec, propagate,
                      scales_from_physical, solve_homogenized)

scales = scales_from_physical(lambda0=2.0 * math.pi / 12.0,
                              ell_c=2.0 * math.pi / 12.0 / 5.0,
                              H=1.0, sigma=0.15, alpha=0.05)
stack = LayerStack(n0_sq=1.0 + 0.05j, ne_sq=3.2 + 0.05j, n2_sq=6.0 + 0.1j,
                   L=0.5, kappa_m=0.05)
k = scales.k
h = 0.02
grid = Grid(origin=(-1.6, -1.3), spacing=(h, h), shape=(161, 131))
xx, zz = grid.meshgrid()
f = ComplexField(grid, np.exp(-((xx / 0.08) ** 2
                                + ((zz - 0.3) / 0.08) ** 2)) + 0j)
u = solve_homogenized(f, stack, k)

spec = InclusionSpec(intensity=2.0, contrast_im_range=(0.0, 0.0), d=2)
a = analytic_covariance_model(spec)
cov = CovarianceModel.from_integrals(a.sigma_r_sq, a.sigma_i_sq, a.gamma,
                                     scales.sigma, a.corr_range)

med = TransportMedium.from_stack(stack, k)
print(f"slab transport medium: k0 = {med.k0:.1f}, ke = {med.ke:.1f}, "
      f"k2 = {med.k2:.1f} (critical angle "
      f"{math.degrees(math.asin(med.k0 / med.ke)):.1f} deg from vertical)")

src = emit_source(u, med, scales, cov, n_angles=128)
print(f"emitted {src.x.size} source cells x {src.angles.size} directions, "
      f"power {src.emitted_power():.3e}")

res = propagate(src, med, detector_z=0.4, x_window=(-30.0, 30.0),
                wigner_shape=(64, 48))
rep = flux_balance(res)
print("\nenergy ledger (fractions of emitted power):")
total = res.tallies.emitted
for name in ("absorbed_slab", "escaped_top", "escaped_bottom",
             "escaped_side", "capped"):
    print(f"  {name:15s} {getattr(res.tallies, name) / total:8.4f}")
print(f"  imbalance       {rep.imbalance:.2e}")

out = Path("demo-output")
out.mkdir(exist_ok=True)
detector_flux_csv(res.detector, out / "detector-flux.csv")
print(f"\ndetector flux written to {out / 'detector-flux.csv'} "
      f"(total {res.detector.total():.3e}, missed {res.detector.missed:.3e})")

print("\ncorrelation model C0 against coherent intensity |u|^2:")
for x in [(0.0, -0.25), (0.3, -0.1), (-0.4, -0.4)]:
    c = correlation_C0(x, x, u, res.wigner, scales)
    coh = abs(u.interp(np.array(x))) ** 2
    print(f"  x = {x}: C0(x,x) = {c.real:.3e}, |u|^2 = {coh:.3e}, "
          f"incoherent fraction {1.0 - coh / c.real:6.3f}")
