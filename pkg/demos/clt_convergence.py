"""Gaussian law of the backscattered projections over a seeded ensemble.

Runs a small ensemble of random-medium solves (this takes a few minutes),
rescales the projections by 1/beta, and compares them against the Gaussian
law predicted by the corrector theory: Kolmogorov-Smirnov p-values for the
real and imaginary parts and the trace ratio of empirical to predicted
covariance.  Also fits the scaling exponents of the corrector norm (slope 1
in beta) and the second-order remainder (slope 2).

Run from the repository root:

    python3 demos/clt_convergence.py
"""

import math
import time

import numpy as np

from slabwave import (ComplexField, CovarianceModel, Grid, InclusionSpec,
                      LayerStack, SolverConfig, analytic_covariance_model,
                      build_ensemble, clt_test, fit_scaling)


def main():
    k = 6.0
    stack = LayerStack(n0_sq=1.0 + 0.05j, ne_sq=3.2 + 0.05j,
                       n2_sq=6.0 + 0.1j, L=0.5, kappa_m=0.05)
    sigma = 0.15
    spec = InclusionSpec(intensity=2.0, contrast_im_range=(0.0, 0.0), d=2)
    h = 0.01
    grid = Grid(origin=(-1.6, -1.3), spacing=(h, h), shape=(321, 261))
    xx, zz = grid.meshgrid()
    f = ComplexField(grid, np.exp(-((xx / 0.08) ** 2
                                    + ((zz - 0.3) / 0.08) ** 2)) + 0j)
    k_region = ((-0.8, 0.8), (0.1, 0.6))

    a = analytic_covariance_model(spec)
    cov = CovarianceModel.from_integrals(a.sigma_r_sq, a.sigma_i_sq, a.gamma,
                                         sigma, a.corr_range)

    beta_values = (0.16, 0.08, 0.04)
    seeds = tuple(range(30))
    t0 = time.time()
    print(f"building ensemble: {len(beta_values)} beta values x "
          f"{len(seeds)} seeds ...")
    ens = build_ensemble(f, stack, k, sigma, spec, beta_values, seeds,
                         k_region, config=SolverConfig())
    print(f"done in {time.time() - t0:.0f}s")

    print("\nprojection law vs predicted Gaussian (smaller beta is closer):")
    for phi_index in range(len(ens.phis)):
        for beta in beta_values:
            res = clt_test(ens, phi_index, cov, beta=beta, min_samples=20)
            print(f"  phi_{phi_index} beta={beta:5.2f}: "
                  f"cov ratio {res.cov_ratio:5.2f}, "
                  f"KS p (re, im) = ({res.ks_p[0]:.2f}, {res.ks_p[1]:.2f})")

    fit = fit_scaling(ens)
    betas = ", ".join(f"{b:g}" for b in fit.beta_values)
    print(f"\nscaling fits over beta in ({betas}):")
    print(f"  ||v^beta||      : slope {fit.slope_v:.2f} "
          f"(se {fit.slope_v_se:.2f}, -> 1 as beta -> 0)")
    print(f"  ||u^b - u - v^b||: slope {fit.slope_resid:.2f} "
          f"(se {fit.slope_resid_se:.2f}, -> 2 as beta -> 0)")
    print("\nat these desk-scale beta values the correlation length is not "
          "yet small\nagainst the wavelength, so the ratios and slopes carry "
          "a visible\nfinite-beta bias; the acceptance suite runs k = 40, "
          "beta = 0.01, 300 seeds")


if __name__ == "__main__":
    main()
