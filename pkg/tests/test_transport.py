"""Tests for the slab transport solver and the correlation model."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slabwave.core import ComplexField, Grid, LayerStack, scales_from_physical
from slabwave.medium import CovarianceModel
from slabwave.transport import (Caps, DetectorFlux, PhaseSpaceRay, SourceSet,
                                TransportMedium, correlation_C0,
                                detector_flux_csv, emit_source, flux_balance,
                                load_wigner, propagate, rt_coefficients,
                                save_wigner, vertical_wavenumber,
                                wigner_slice_csv)

MED = TransportMedium(k0=4.0, ke=5.0, k2=6.0, mu0=0.1, mu_e=0.7, mu2=0.9,
                      L=1.0)
MATCHED = TransportMedium(k0=5.0, ke=5.0, k2=5.0, mu0=0.0, mu_e=0.0,
                          mu2=0.0, L=1.0)
SCALES = scales_from_physical(0.1, 0.05, 1.0, 0.2, 0.01)
COV = CovarianceModel.from_integrals(1.0, 1.0, 0.0, 0.2, 0.3)


def _uniform_field(nx=9, nz=21, h=0.05, x0=-0.2, z0=-1.0):
    grid = Grid(origin=(x0, z0), spacing=(h, h), shape=(nx, nz))
    return ComplexField(grid, np.ones(grid.shape, dtype=complex))


def _single_cell_source(z, angle, weight=1.0, ke=MED.ke):
    return SourceSet(x=np.array([0.0]), z=np.array([z]),
                     cell_weight=np.array([weight]),
                     angles=np.array([angle]), constant=1.0, ke=ke,
                     eta=SCALES.eta, beta=SCALES.beta)


# ---------------------------------------------------------------------------
# kinematics
# ---------------------------------------------------------------------------

class TestMedium:
    def test_ordering_enforced(self):
        with pytest.raises(ValueError):
            TransportMedium(k0=5.0, ke=4.0, k2=6.0, mu0=0, mu_e=0, mu2=0,
                            L=1.0)
        with pytest.raises(ValueError):
            TransportMedium(k0=4.0, ke=5.0, k2=6.0, mu0=-0.1, mu_e=0, mu2=0,
                            L=1.0)

    def test_from_stack(self):
        stack = LayerStack(1 + 0.2j, 3 + 0.3j, 6 + 0.5j, L=2.0, kappa_m=0.2)
        k = 10.0
        med = TransportMedium.from_stack(stack, k)
        assert med.k0 == pytest.approx(k)
        assert med.ke == pytest.approx(k * math.sqrt(3.0))
        assert med.k2 == pytest.approx(k * math.sqrt(6.0))
        assert med.mu_e == pytest.approx(k ** 2 * 0.3)
        assert med.L == 2.0


class TestVerticalWavenumber:
    def test_normal_incidence(self):
        assert vertical_wavenumber(MED, "e", 0.0) == pytest.approx(MED.ke)

    def test_grazing_air(self):
        assert vertical_wavenumber(MED, "air", MED.k0) == 0.0

    def test_evanescent_air_clamps_to_zero(self):
        assert vertical_wavenumber(MED, 0, MED.k0 + 0.5) == 0.0

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            vertical_wavenumber(MED, "e", -0.1)


class TestRtCoefficients:
    def test_matched_media(self):
        R, T = rt_coefficients(MATCHED, "top", 2.0)
        assert R == pytest.approx(0.0)
        assert T == pytest.approx(1.0)

    def test_normal_incidence_two_to_one(self):
        # ke = 2 k0 at normal incidence: R = 1/9, T = 16/9
        med = TransportMedium(k0=2.0, ke=4.0, k2=5.0, mu0=0, mu_e=0, mu2=0,
                              L=1.0)
        R, T = rt_coefficients(med, "top", 0.0)
        assert R == pytest.approx(1.0 / 9.0, rel=1e-14)
        assert T == pytest.approx(16.0 / 9.0, rel=1e-14)

    def test_total_internal_reflection_branch(self):
        for kp in (MED.k0, MED.k0 + 0.3, MED.ke - 1e-9):
            R, T = rt_coefficients(MED, "top", kp)
            assert (R, T) == (1.0, 0.0)

    def test_flux_identity_thousand_angles(self):
        rng = np.random.default_rng(7)
        kp = rng.uniform(0.0, MED.k0 - 1e-9, 1000)
        for iface, layer in (("top", "air"), ("bottom", "water")):
            R, T = rt_coefficients(MED, iface, kp)
            kez = vertical_wavenumber(MED, "e", kp)
            kjz = vertical_wavenumber(MED, layer, kp)
            assert np.max(np.abs(R + (kjz / kez) * T - 1.0)) < 1e-13

    @settings(max_examples=100, deadline=None)
    @given(k0=st.floats(0.5, 5.0), dke=st.floats(1e-6, 5.0),
           dk2=st.floats(1e-6, 5.0), frac=st.floats(0.0, 0.999))
    def test_flux_identity_random_media(self, k0, dke, dk2, frac):
        med = TransportMedium(k0=k0, ke=k0 + dke, k2=k0 + dke + dk2,
                              mu0=0, mu_e=0, mu2=0, L=1.0)
        kp = frac * k0
        for iface, layer in (("top", "air"), ("bottom", "water")):
            R, T = rt_coefficients(med, iface, kp)
            kez = vertical_wavenumber(med, "e", kp)
            kjz = vertical_wavenumber(med, layer, kp)
            assert abs(R + (kjz / kez) * T - 1.0) < 1e-12
            assert 0.0 <= R <= 1.0 and T >= 0.0


class TestPhaseSpaceRay:
    def test_validation(self):
        ray = PhaseSpaceRay(x=(0.0, -0.5), p=(3.0, 4.0), weight=1.0)
        assert ray.k_perp == 3.0
        with pytest.raises(ValueError):
            PhaseSpaceRay(x=(0, 0), p=(1, 0), weight=-1.0)
        with pytest.raises(ValueError):
            PhaseSpaceRay(x=(0, 0), p=(0.0, 0.0), weight=1.0)


# ---------------------------------------------------------------------------
# source emission
# ---------------------------------------------------------------------------

class TestEmitSource:
    def test_zero_field_is_empty(self):
        u = ComplexField.zeros(_uniform_field().grid)
        src = emit_source(u, MED, SCALES, COV, n_angles=8)
        assert src.n_cells == 0
        assert src.emitted_power() == 0.0

    def test_total_power_quadrature(self):
        u = _uniform_field()
        src = emit_source(u, MED, SCALES, COV, n_angles=16)
        # direct quadrature of the source display: the shell delta
        # contributes 1/(2 ke) * (shell circumference ke * 2 pi) = pi
        zs = u.grid.axis(1)
        in_slab = (zs > -MED.L) & (zs <= 0.0)
        direct = math.pi * np.sum(
            np.abs(u.values[:, in_slab]) ** 2) * u.grid.cell_volume
        assert src.emitted_power() == pytest.approx(direct, rel=1e-13)

    def test_aggregation_preserves_power(self):
        u = _uniform_field(nx=40, nz=60, h=0.02, x0=-0.4, z0=-1.1)
        fine = emit_source(u, MED, SCALES, COV, n_angles=8, max_cells=10 ** 9)
        coarse = emit_source(u, MED, SCALES, COV, n_angles=8, max_cells=64)
        assert coarse.n_cells <= 64 < fine.n_cells
        assert coarse.emitted_power() == pytest.approx(fine.emitted_power(),
                                                       rel=1e-13)

    def test_grid_must_cover_slab(self):
        u = _uniform_field(nz=10)  # stops at z = -0.55
        with pytest.raises(ValueError, match="cover the slab"):
            emit_source(u, MED, SCALES, COV)

    def test_odd_angle_count_rejected(self):
        with pytest.raises(ValueError, match="even"):
            emit_source(_uniform_field(), MED, SCALES, COV, n_angles=15)

    def test_source_constant(self):
        src = emit_source(_uniform_field(), MED, SCALES, COV)
        d = 2
        expect = (math.pi * (2 * math.pi) ** 4 * COV.tau_sq
                  / SCALES.eta ** (d + 1))
        assert src.constant == pytest.approx(expect, rel=1e-14)


# ---------------------------------------------------------------------------
# propagation and conservation
# ---------------------------------------------------------------------------

class TestPropagate:
    def test_matched_lossless_conservation(self):
        """Free transport: every ray exits; detector sees the upward half."""
        u = _uniform_field()
        src = emit_source(u, MATCHED, SCALES, COV, n_angles=16)
        res = propagate(src, MATCHED, detector_z=0.5, x_window=(-60.0, 60.0),
                        wigner_shape=(40, 30))
        rep = flux_balance(res)
        assert rep.imbalance < 1e-10
        assert rep.capped == 0.0
        half = src.emitted_power() / 2.0
        assert res.tallies.escaped_top == pytest.approx(half, rel=1e-12)
        assert res.tallies.escaped_bottom == pytest.approx(half, rel=1e-12)
        assert (res.detector.total() + res.detector.missed
                == pytest.approx(half, rel=1e-12))

    def test_vertical_ray_attenuation(self):
        """One vertical ray: closed-form line integral through the slab."""
        src = _single_cell_source(z=-MED.L / 2.0, angle=math.pi / 2.0)
        res = propagate(src, MED, detector_z=0.25, x_window=(-5.0, 5.0),
                        caps=Caps(max_bounces=1, min_weight=0.0),
                        deposit=False)
        w0 = math.pi  # cell weight 1, one angle: 1 * (2 pi) / 2
        att = math.exp(-MED.mu_e * (MED.L / 2.0) / MED.ke)
        R, T = rt_coefficients(MED, "top", 0.0)
        expect = w0 * att * T * (MED.k0 / MED.ke)
        assert res.tallies.escaped_top == pytest.approx(expect, rel=1e-12)
        det_expect = expect * math.exp(-MED.mu0 * 0.25 / MED.k0)
        assert res.detector.total() == pytest.approx(det_expect, rel=1e-12)
        assert flux_balance(res).imbalance < 1e-10

    def test_total_internal_reflection_keeps_weight(self):
        # angle steep enough that k_perp = ke |cos| > k0: no top escape
        angle = 0.2  # k_perp = 5 cos(0.2) = 4.90 > 4
        lossless = TransportMedium(k0=4.0, ke=5.0, k2=6.0, mu0=0.0,
                                   mu_e=0.0, mu2=0.0, L=1.0)
        src = _single_cell_source(z=-0.5, angle=angle, ke=lossless.ke)
        res = propagate(src, lossless, detector_z=0.25,
                        x_window=(-50.0, 50.0),
                        caps=Caps(max_bounces=2, min_weight=0.0),
                        deposit=False)
        assert res.tallies.escaped_top == 0.0
        # first event is the top interface: full weight survives it, so
        # everything is split between the bottom leak and the bounce cap
        w0 = math.pi
        booked = (res.tallies.escaped_bottom + res.tallies.capped
                  + res.tallies.escaped_side)
        assert booked == pytest.approx(w0, rel=1e-12)
        assert res.tallies.capped > 0.0

    def test_lossy_bookkeeping_identity(self):
        u = _uniform_field()
        src = emit_source(u, MED, SCALES, COV, n_angles=32)
        res = propagate(src, MED, detector_z=0.5, x_window=(-4.0, 4.0))
        rep = flux_balance(res)
        assert rep.imbalance < 1e-10
        assert res.tallies.absorbed_slab == pytest.approx(
            res.tallies.emitted - rep.escaped - rep.capped - rep.dropped,
            rel=1e-10)
        assert res.tallies.absorbed_slab > 0.0

    def test_degenerate_horizontal_ray_dropped(self):
        src = _single_cell_source(z=-0.5, angle=0.0)  # exactly horizontal
        res = propagate(src, MED, detector_z=0.5, x_window=(-2.0, 2.0),
                        deposit=False)
        assert res.tallies.n_dropped == 1
        assert res.tallies.dropped == pytest.approx(math.pi)
        assert flux_balance(res).imbalance < 1e-10

    def test_wigner_nonnegative(self):
        u = _uniform_field()
        src = emit_source(u, MED, SCALES, COV, n_angles=16)
        res = propagate(src, MED, detector_z=0.5, x_window=(-3.0, 3.0))
        assert np.all(res.wigner.values >= 0.0)
        assert np.any(res.wigner.values > 0.0)

    def test_absorption_track_length_identity(self):
        """Independent oracle for the deposited density W.

        In a matched absorbing medium (no interface branching) the exact
        line integral of the attenuated weight along each ray equals
        (ke / mu) * (absorbed weight); the phase-space integral of the
        deposited density over the slab must reproduce it to the track
        sampling tolerance.
        """
        med = TransportMedium(k0=5.0, ke=5.0, k2=5.0, mu0=0.0, mu_e=2.0,
                              mu2=0.0, L=1.0)
        u = _uniform_field()
        src = emit_source(u, med, SCALES, COV, n_angles=16)
        # wide window so no ray leaves laterally; z bins aligned with z = 0
        res = propagate(src, med, detector_z=0.5, x_window=(-30.0, 30.0),
                        wigner_shape=(240, 48), wigner_z=(-1.0, 0.2))
        W = res.wigner
        zs = W.grid.axis(1)
        slab = zs < 0.0
        cell = W.grid.cell_volume
        integral = W.values[:, slab, :].sum() * cell * W.angle_weight * med.ke
        expect = (med.ke / med.mu_e) * res.tallies.absorbed_slab
        assert integral == pytest.approx(expect, rel=5e-3)

    def test_worker_count_invariance(self):
        u = _uniform_field(nx=15, nz=21)
        src = emit_source(u, MED, SCALES, COV, n_angles=16)
        kwargs = dict(detector_z=0.4, x_window=(-3.0, 3.0),
                      wigner_shape=(32, 24), chunk_cells=8)
        serial = propagate(src, MED, **kwargs)
        parallel = propagate(src, MED, n_jobs=3, **kwargs)
        assert np.array_equal(serial.wigner.values, parallel.wigner.values)
        assert np.array_equal(serial.detector.values,
                              parallel.detector.values)
        assert serial.tallies == parallel.tallies

    def test_angle_refinement_stability(self):
        u = _uniform_field()
        totals = []
        # the critical-angle discontinuity in T makes convergence O(1/n);
        # 128 nodes is the first level where doubling moves the flux < 2%
        for n in (128, 256):
            src = emit_source(u, MED, SCALES, COV, n_angles=n)
            res = propagate(src, MED, detector_z=0.4, x_window=(-6.0, 6.0),
                            deposit=False)
            totals.append(res.detector.total() / src.emitted_power())
        assert abs(totals[1] - totals[0]) < 0.02 * abs(totals[1])

    def test_detector_plane_must_be_in_air(self):
        src = _single_cell_source(z=-0.5, angle=math.pi / 2.0)
        with pytest.raises(ValueError, match="air"):
            propagate(src, MED, detector_z=-0.1, x_window=(-1.0, 1.0))


# ---------------------------------------------------------------------------
# correlation model
# ---------------------------------------------------------------------------

def _small_run():
    grid = Grid(origin=(-0.5, -1.2), spacing=(0.02, 0.02), shape=(51, 71))
    X, Z = grid.meshgrid()
    u = ComplexField(grid, np.exp(-(X / 0.2) ** 2 - ((Z + 0.5) / 0.2) ** 2)
                     * np.exp(1j * 3.0 * Z))
    src = emit_source(u, MED, SCALES, COV, n_angles=32, max_cells=256)
    res = propagate(src, MED, detector_z=0.2, x_window=(-3.0, 3.0),
                    wigner_shape=(48, 36))
    return u, res


class TestCorrelation:
    def test_zero_wigner_reduces_to_field_product(self):
        u, res = _small_run()
        W0 = res.wigner
        from dataclasses import replace
        W0 = replace(W0, values=np.zeros_like(W0.values))
        x, y = (0.1, -0.4), (0.05, -0.45)
        val = correlation_C0(x, y, u, W0, SCALES)
        ux = complex(u.interp(np.array([x])).ravel()[0])
        uy = complex(u.interp(np.array([y])).ravel()[0])
        assert val == pytest.approx(ux * np.conj(uy), rel=1e-14)

    def test_diagonal_real_and_dominates(self):
        u, res = _small_run()
        x = (0.1, -0.4)
        val = correlation_C0(x, x, u, res.wigner, SCALES)
        assert val.imag == pytest.approx(0.0, abs=1e-16 * abs(val))
        ux = abs(complex(u.interp(np.array([x])).ravel()[0])) ** 2
        assert val.real >= ux

    def test_hermitian_symmetry(self):
        u, res = _small_run()
        pairs = [((0.1, -0.4), (0.14, -0.44)), ((-0.2, -0.3), (-0.16, -0.33)),
                 ((0.0, -0.6), (0.05, -0.55))]
        for x, y in pairs:
            cxy = correlation_C0(x, y, u, res.wigner, SCALES)
            cyx = correlation_C0(y, x, u, res.wigner, SCALES)
            assert cxy == pytest.approx(np.conj(cyx), rel=1e-12)

    def test_midpoint_outside_window_rejected(self):
        u, res = _small_run()
        with pytest.raises(ValueError, match="window"):
            correlation_C0((50.0, -0.5), (50.1, -0.5), u, res.wigner, SCALES)


# ---------------------------------------------------------------------------
# serialization and CSV
# ---------------------------------------------------------------------------

class TestSerialization:
    def test_wigner_roundtrip_bitwise(self, tmp_path):
        _, res = _small_run()
        path = save_wigner(res.wigner, tmp_path / "w.bin")
        back = load_wigner(path)
        assert np.array_equal(back.values, res.wigner.values)
        assert back.med == res.wigner.med
        assert back.constant == res.wigner.constant
        assert back.grid == res.wigner.grid

    def test_checksum_guard(self, tmp_path):
        _, res = _small_run()
        path = save_wigner(res.wigner, tmp_path / "w.bin")
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="checksum"):
            load_wigner(path)

    def test_csv_emitters(self, tmp_path):
        _, res = _small_run()
        det_path = detector_flux_csv(res.detector, tmp_path / "det.csv")
        lines = det_path.read_text().strip().splitlines()
        assert lines[0] == "x,angle,flux"
        n_bins = res.detector.values.shape[0]
        assert len(lines) == 1 + n_bins * res.detector.angles.size
        total = sum(float(row.split(",")[2]) for row in lines[1:])
        assert total == pytest.approx(res.detector.total(), rel=1e-12)

        w_path = wigner_slice_csv(res.wigner, -0.5, tmp_path / "w.csv")
        rows = w_path.read_text().strip().splitlines()
        assert rows[0] == "x,angle,w"
        assert len(rows) == 1 + (res.wigner.grid.shape[0]
                                 * res.wigner.angles.size)
